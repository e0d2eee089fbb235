use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("no valid alignment: {0}")]
    ImpossibleAlignment(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("regime error: {0}")]
    Regime(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("undefined rate: {0}")]
    UndefinedRate(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("empty target: {0}")]
    EmptyTarget(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
