use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar function received an argument outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke a documented precondition (shape, range, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed model input such as an out-of-vocabulary token.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A loss or gradient became non-finite.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Client/server exchange with incompatible shapes.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("finite-difference oracle failed: {0}")]
    Oracle(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
