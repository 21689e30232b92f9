//! Operator tooling for the JND lab: subcommands and the HTTP service.

pub mod commands;
pub mod config;
pub mod server;
