//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An input is numerically degenerate (e.g. a zero vector fed to a
    /// normalizer). Surfaced instead of silently clamping so that dead
    /// branches are visible.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A configuration failed validation before any work started.
    #[error("invalid config: {0}")]
    Config(String),

    /// Loaded or constructed data violates a structural invariant.
    #[error("invalid data: {0}")]
    Validation(String),

    /// A file could not be decoded; `location` is a byte offset or line.
    #[error("parse error at {location}: {msg}")]
    Parse { location: String, msg: String },

    /// A batch cannot supply the pairs/triplets a loss needs.
    #[error("batch unusable for loss: {0}")]
    BatchDegenerate(String),

    /// Training produced a non-finite value; the run is aborted.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
