use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the engine.
///
/// Every variant maps onto one of the stable process exit codes through
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, shape mismatch or violated structural invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data (labels out of range, wrong dataset layout).
    #[error("data error: {0}")]
    Data(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Training aborted because a loss or gradient went non-finite.
    #[error("training aborted at epoch {epoch}, batch {batch}: {reason}")]
    TrainingAborted {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    /// A verification fixture failed its tolerance.
    #[error("verification failed: {0}")]
    Verification(String),

    /// Corrupt or inconsistent file contents.
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 verification failure, 2 config error,
    /// 3 training abort, 4 I/O or corruption.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Verification(_) => 1,
            Error::Config(_) | Error::Data(_) | Error::Usage(_) => 2,
            Error::TrainingAborted { .. } => 3,
            Error::Corrupt { .. } | Error::Io { .. } => 4,
        }
    }
}
