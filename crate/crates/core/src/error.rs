//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its contents do not match the expected format.
    #[error("format error at {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    /// A precondition or invariant of an operation was violated.
    #[error("validation error: {0}")]
    Validation(String),
    /// A stage-schedule rule was violated (stage-2 inputs before epoch T).
    #[error("schedule violation: {0}")]
    Schedule(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

/// Machine-readable process exit codes, one per error class.
impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Format { .. } => 3,
            Error::Validation(_) => 4,
            Error::Schedule(_) => 5,
        }
    }
}
