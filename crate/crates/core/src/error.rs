//! Error type shared across the library.

use thiserror::Error;

/// Unified error for tensor, autodiff, model, training and I/O failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A numeric invariant was violated (NaN gradients, divergence, failed check).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The tape was used after backward consumed it, or misused during recording.
    #[error("tape error: {0}")]
    Tape(String),

    /// Invalid or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed corpus, vocabulary or task specification.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed, truncated or inconsistent checkpoint.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: usage errors are handled by the argument
    /// parser (1); data, config and I/O problems map to 2; numeric failures to 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
