use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad percentile, alpha out of range, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Tensor shape does not match what the operation requires.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// On-disk dataset container is malformed; names the offending sample.
    #[error("dataset format error for `{id}`: {msg}")]
    Format { id: String, msg: String },

    /// Checkpoint file cannot be loaded (version or config mismatch).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
