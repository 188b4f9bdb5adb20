use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Input data that cannot be used (empty corpus, missing validation set, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A checkpoint file whose schema tag does not match what the reader expects.
    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A model invariant failed to hold. Always a bug.
    #[error("internal invariant failure: {0}")]
    Internal(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Whether the failure stems from a broken internal invariant rather
    /// than from the data or the caller.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Internal(_))
    }
}
