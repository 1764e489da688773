use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the adaptation toolkit.
#[derive(Debug, Error)]
pub enum SrdaError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("class count mismatch: expected {expected}, got {actual}")]
    ClassMismatch { expected: usize, actual: usize },

    #[error("simplex violation: {0}")]
    SimplexViolation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("source-free contract violation: {0}")]
    ContractViolation(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SrdaError {
    pub fn shape_mismatch(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        SrdaError::ShapeMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        SrdaError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SrdaError>;
