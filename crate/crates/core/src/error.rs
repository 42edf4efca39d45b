use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("no valid gallery entries remain after cross-camera filtering")]
    NoValidGallery,
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
