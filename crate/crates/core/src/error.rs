use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the completion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("degenerate cloud")]
    DegenerateCloud,

    #[error("sample larger than cloud ({requested} > {available})")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch { expected: usize, actual: usize, context: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("parse error in {}: line {line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint mismatch on `{field}`: checkpoint has {found}, config expects {expected}")]
    CheckpointMismatch { field: String, expected: String, found: String },

    #[error("non-finite {name}")]
    NonFinite { name: String },

    #[error("training aborted after {0} consecutive rejected steps")]
    NumericalAbort(usize),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn dims(expected: usize, actual: usize, context: &str) -> Self {
        Error::DimensionMismatch { expected, actual, context: context.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
