use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QmlError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// An invariant that holds by construction was observed to be broken.
    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, QmlError>;

pub(crate) fn invalid(msg: impl Into<String>) -> QmlError {
    QmlError::InvalidArgument(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> QmlError {
    let path = path.into();
    move |source| QmlError::Io { path, source }
}
