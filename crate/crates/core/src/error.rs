use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode audio {path}: {message}")]
    Audio { path: PathBuf, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    /// Distinct from [`Error::Validation`] so callers can skip short utterances.
    #[error("utterance too short: {frames} frames available, {needed} needed")]
    TooShort { frames: usize, needed: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite {objective} loss at {stage} step {step}")]
    Divergence {
        stage: String,
        objective: String,
        step: u64,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

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
}
