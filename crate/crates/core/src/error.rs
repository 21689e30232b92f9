use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav error on {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("unsupported wav encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("zero-length data chunk in {0}")]
    ZeroLength(PathBuf),
    #[error("empty buffer")]
    EmptyBuffer,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero-energy signal: {0}")]
    ZeroEnergy(&'static str),
    #[error("sample rate {got} Hz not supported (expected {expected} Hz)")]
    SampleRate { got: u32, expected: u32 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty noise bank with additive category selected")]
    EmptyNoiseBank,
    #[error("unknown noise source {0:?}")]
    UnknownNoise(String),
    #[error("codec hook not configured")]
    CodecNotConfigured,
    #[error("codec command `{command}` failed: {detail}")]
    CodecFailed { command: String, detail: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} is not in progress")]
    SessionClosed(String),
    #[error("duplicate key with different payload: {0}")]
    DuplicateKey(String),
    #[error("incomplete session {id}: {have} of {need} trials")]
    IncompleteSession {
        id: String,
        have: usize,
        need: usize,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("missing reference audio {0:?}")]
    MissingReference(String),
    #[error("answer pending")]
    AnswerPending,
    #[error("stage mismatch: expected {expected}, session is at {actual}")]
    StageMismatch { expected: String, actual: String },
    #[error("stale or unknown trial id {0}")]
    StaleTrial(String),
    #[error("session finished")]
    SessionFinished,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("corpus missing labels")]
    MissingLabels,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("divergence: distance {distance} exceeded 10x initial {initial} at step {step}")]
    Divergence {
        step: usize,
        distance: f64,
        initial: f64,
    },
    #[error("zero variance input")]
    ZeroVariance,
    #[error("not enough groups: {0}")]
    NotEnoughGroups(usize),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
