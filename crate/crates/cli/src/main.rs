use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jndlab::commands::{self, *};
use jndlab::config;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "jndlab", version, about = "Perceptual audio JND lab")]
struct Cli {
    /// JSON config file mirroring the flags
    #[arg(long, global = true, env = "JND_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render one perturbation of a WAV file
    Perturb(PerturbArgs),
    /// Run simulated listeners through the full session protocol
    Simulate(SimulateArgs),
    /// Fit the psychometric function of a stored session
    FitJnd(FitArgs),
    /// Train the metric (pre, lin, fin or scratch)
    Train(TrainArgs),
    /// Correlate the metric with MOS or 2AFC judgments
    Eval(EvalArgs),
    /// Gradient descent on a noisy input under the metric
    GradDemo(GradDemoArgs),
    /// Run the listening-test HTTP service
    Serve(ServeArgs),
    /// Render accepted judgments to WAV triplets plus a manifest
    ExportTriplets(ExportArgs),
}

fn run(cli: Cli) -> anyhow::Result<Value> {
    let file = config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Perturb(a) => commands::perturb(&config::merge(a, &file, "perturb")?),
        Command::Simulate(a) => commands::simulate(&config::merge(a, &file, "simulate")?),
        Command::FitJnd(a) => commands::fit_jnd(&config::merge(a, &file, "fit-jnd")?),
        Command::Train(a) => commands::train(&config::merge(a, &file, "train")?),
        Command::Eval(a) => commands::eval(&config::merge(a, &file, "eval")?),
        Command::GradDemo(a) => commands::grad_demo(&config::merge(a, &file, "grad-demo")?),
        Command::Serve(a) => commands::serve(&config::merge(a, &file, "serve")?),
        Command::ExportTriplets(a) => {
            commands::export(&config::merge(a, &file, "export-triplets")?)
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = match e.downcast_ref::<jnd_core::Error>() {
                Some(core) => format!("{core:?}")
                    .split(|c: char| !c.is_alphanumeric())
                    .next()
                    .unwrap_or("error")
                    .to_string(),
                None => "error".into(),
            };
            let mut message = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !message.contains(&text) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&text);
                }
            }
            fail(&kind, message)
        }
    }
}
