use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {msg}")]
    Data {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("vocabulary mismatch: checkpoint has {expected}, current vocabulary is {actual}")]
    VocabMismatch { expected: String, actual: String },

    #[error("parameter {name}: shape {found:?} does not match {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
