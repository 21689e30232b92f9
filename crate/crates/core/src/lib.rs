//! Perceptual-audio JND laboratory: calibrated perturbations, adaptive
//! psychometric fitting, judgment corpora, a learned deep-feature metric and
//! its evaluation statistics.

pub mod audio;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod jnd;
pub mod metric;
pub mod perturb;
pub mod reference;
pub mod session;
pub mod synth;
pub mod toy;

pub use audio::{AudioBuffer, PadSide, WavEncoding, CANONICAL_RATE};
pub use error::{Error, Result};
pub use jnd::{FitReport, JndSession, PriorSpec, ProbePolicy, PsychometricFit, Trial};
pub use perturb::{
    apply_axis, draw_axis, strength_to_params, Category, KindTemplate, NoiseBank, PerturbContext,
    PerturbationAxis, PerturbationKind,
};
pub use reference::ReferencePool;
