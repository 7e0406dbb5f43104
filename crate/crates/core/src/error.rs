use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A hyperparameter is out of its valid range (e.g. temperature <= 0).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A numeric input is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration, detected before any work starts.
    #[error("config error: {0}")]
    Config(String),

    /// A loss became NaN or infinite during training.
    #[error("non-finite loss {value} at step {step}")]
    NonFinite { step: usize, value: f64 },

    /// Malformed file content.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
