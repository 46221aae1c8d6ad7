use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CmstError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CmstError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}: bad header: {reason}")]
    BadHeader { path: PathBuf, reason: String },

    #[error("{path}: dimension mismatch: {reason}")]
    DimensionMismatch { path: PathBuf, reason: String },

    #[error("{path}: truncated payload: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("checkpoint refused: {0}")]
    CheckpointMismatch(String),

    #[error("training diverged at epoch {epoch}: {loss} = {value}")]
    Divergence {
        epoch: usize,
        loss: &'static str,
        value: f64,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CmstError {
    pub fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        CmstError::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CmstError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CmstError::Io {
            path: path.into(),
            source,
        }
    }
}
