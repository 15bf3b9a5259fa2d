use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TiltError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TiltError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint version mismatch: {0}")]
    CheckpointVersion(String),

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint contains unknown tensor `{0}`")]
    CheckpointUnknown(String),

    #[error("checkpoint is missing tensor `{0}`")]
    CheckpointMissing(String),

    #[error("configuration mismatch in fields: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TiltError::Shape(msg.into()))
}
