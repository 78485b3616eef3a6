//! Shared error type for the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("dimension error in {op}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        expected: String,
        found: String,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values reached a layer boundary.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// The Riccati/Lyapunov machinery failed to produce a stabilizing gain.
    #[error("gain synthesis failed: {0}")]
    Synthesis(String),

    /// A* could not reach the goal pose.
    #[error("planning failed: {0}")]
    Planning(String),

    /// Checkpoint files were malformed or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A run configuration was internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training aborted on a non-finite loss.
    #[error("numeric abort: {0}")]
    NumericAbort(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
