//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Out-of-range or non-finite argument to a constructor or operation.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Incompatible tensor shapes, names both sides.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Configuration rejected; `path` is the offending field.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// NaN/Inf or divergence detected during training or simulation.
    #[error("numerical fault: {0}")]
    Numerical(String),

    /// Checkpoint file malformed or incompatible with the requested network.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// API misuse, e.g. backward before any forward pass.
    #[error("usage error: {0}")]
    Usage(String),

    /// Metrics CSV header does not match the expected schema.
    #[error("csv schema mismatch: {0}")]
    Schema(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
