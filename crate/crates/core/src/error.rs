//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A transition with sigma = 0 admits no density; policy-gradient
    /// objectives that need one must surface this instead of dividing by zero.
    #[error("no transition density: {0}")]
    NoDensity(String),

    /// The black-box reward produced no usable winner/loser pairs for too long.
    #[error("degenerate reward: {0}")]
    DegenerateReward(String),

    #[error("missing prerequisite artifact: {0}")]
    Precondition(String),

    #[error("config validation failed at `{path}`: {message}")]
    ConfigValidation { path: String, message: String },

    #[error("checkpoint mismatch: expected {expected}, found {found}")]
    CheckpointMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
