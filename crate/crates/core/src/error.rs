use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TscError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TscError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A caller broke an operation's precondition (e.g. stepping off a decision boundary).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TscError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        TscError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TscError::Io {
            path: path.into(),
            source,
        }
    }
}
