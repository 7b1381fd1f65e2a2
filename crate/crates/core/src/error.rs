use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at {location}: expected {expected}, got {actual}")]
    DimensionMismatch {
        location: String,
        expected: usize,
        actual: usize,
    },

    #[error("label {label} of sample {sample} is out of range for {classes} classes")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        classes: usize,
    },

    #[error("non-finite loss at sample {sample}")]
    NonFiniteLoss { sample: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("no joint validation set is available for a {strategy} holdout")]
    NoJointSet { strategy: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn dims(location: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            location: location.into(),
            expected,
            actual,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a description of what was running when it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
