use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pruning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("tensor '{tensor}': unsupported dtype {dtype}")]
    UnsupportedDtype { tensor: String, dtype: String },

    #[error(
        "tensor '{tensor}': unsupported shape {shape:?} (only 1-D and 2-D tensors are accepted)"
    )]
    UnsupportedShape { tensor: String, shape: Vec<usize> },

    #[error("tensor '{tensor}': {reason}")]
    Data { tensor: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty calibration: at least one token is required")]
    EmptyCalibration,

    #[error("constraint violation: {0}")]
    Constraint(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
