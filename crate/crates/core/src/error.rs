use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("corrupt input: {0}")]
    Corruption(String),

    #[error("schema mismatch: expected hash {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("party {party}: {available} unique ids available, {requested} requested")]
    Size {
        party: String,
        available: usize,
        requested: usize,
    },

    #[error("embedding lookup failed for document key {0}")]
    Lookup(String),

    #[error("non-finite loss for user {user_id}")]
    Numerical { user_id: String },

    #[error("undefined statistic: {0}")]
    Undefined(String),

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
