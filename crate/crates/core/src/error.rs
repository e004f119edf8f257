//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A tensor op produced NaN or Inf.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// backward() was called again without recording new ops.
    #[error("backward already consumed this tape; re-run the forward pass first")]
    BackwardReplay,
    /// backward() root must be a scalar.
    #[error("backward root must be a scalar tensor, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    /// Malformed checkpoint container.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    /// A named parameter is missing or has the wrong shape.
    #[error("parameter {0}: {1}")]
    Parameter(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
