use thiserror::Error;

use crate::taskgen::LanguageId;

/// Errors produced by the pruning laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("stale activations: forward pass taken at model version {pass}, model is now at {model}")]
    StaleActivations { pass: u64, model: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("unknown language {0}")]
    UnknownLanguage(LanguageId),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("replay diverged at event {index} (step {step}): {detail}")]
    ReplayDivergence { index: usize, step: u64, detail: String },

    #[error("run failed for seed {seed}: {message}")]
    Run { seed: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
