//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpmixError {
    /// A caller broke an operation contract (shape mismatch, bad argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Dataset or run configuration is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training hit a non-finite value and aborted.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image format error on {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl SpmixError {
    pub fn contract(msg: impl Into<String>) -> Self {
        SpmixError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        SpmixError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SpmixError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SpmixError>;
