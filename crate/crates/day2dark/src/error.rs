//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by dataset generation, model construction, training and I/O.
#[derive(Debug, Error)]
pub enum Day2DarkError {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration is internally inconsistent or incompatible with the data.
    #[error("configuration error: {0}")]
    Config(String),

    /// A clip could not be synthesized under the requested constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// A checkpoint or cache was produced under a different configuration.
    #[error("fingerprint mismatch: expected {expected:#018x}, found {found:#018x}")]
    Fingerprint { expected: u64, found: u64 },

    /// A binary artifact on disk is corrupt or has an unknown version.
    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    /// Underlying filesystem failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Day2DarkError>;

impl Day2DarkError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Day2DarkError::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Day2DarkError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Day2DarkError::Config(msg.into())
    }
}
