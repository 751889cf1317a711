//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// File does not start with the expected magic bytes.
    #[error("bad magic, expected {expected}")]
    BadMagic { expected: &'static str },

    #[error("unsupported version {found}, expected {expected}")]
    VersionMismatch { expected: u32, found: u32 },

    /// File ended before a complete record could be read.
    #[error("truncated: {0}")]
    Truncated(String),

    /// A stored or computed value violates a field contract.
    #[error("validation: {0}")]
    Validation(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse: {0}")]
    Parse(String),

    /// Optimization produced a non-finite loss.
    #[error("diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
