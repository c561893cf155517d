use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LeoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LeoError {
    /// Inconsistent shapes or dimensions handed to an operation.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called with arguments outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// A forward or backward pass produced NaN or infinity.
    #[error("numeric error at node {node} ({op}): non-finite value")]
    NonFinite { node: usize, op: &'static str },

    #[error("normalization error at byte {offset}: {message}")]
    Normalize { offset: usize, message: String },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("{path}:{line}: {message}")]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("model format error: {0}")]
    Format(String),

    #[error("training aborted at epoch {epoch}, batch {batch}: non-finite loss")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LeoError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LeoError::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        LeoError::Usage(msg.into())
    }
}
