//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by dataset loading, episode construction, model math and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A manifest or config file failed to parse.
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    /// A loaded structure violated one of its invariants.
    #[error("validation error: {0}")]
    Validation(String),

    /// Episode sampling could not satisfy the task configuration.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Tensor shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Numerical failure (non-finite loss, singular system, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Checkpoint or cache container is malformed.
    #[error("container error in {path}: {msg}")]
    Container { path: PathBuf, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
