//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SageError {
    /// Tensor extents disagree with what an operation requires.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN/Inf reached a place that requires finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed input file; `offset` is the byte position of the problem.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SageError>;

impl SageError {
    pub fn shape(msg: impl Into<String>) -> Self {
        SageError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        SageError::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        SageError::Contract(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        SageError::Numeric(msg.into())
    }
}
