//! Crate-wide error type. Variants map one-to-one onto failure classes the
//! command-line layer turns into distinct exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A NaN or infinity reached an operation that requires finite input.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The Jacobi sweep limit was exhausted before the off-diagonal mass
    /// dropped below tolerance.
    #[error("svd did not converge after {sweeps} sweeps on a {rows}x{cols} matrix")]
    ConvergenceFailure { sweeps: usize, rows: usize, cols: usize },

    /// Cosine similarity against a vector with zero norm.
    #[error("cosine similarity of a zero vector")]
    ZeroVector,

    /// Two operands that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A single operand's shape violates a precondition.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// An input collection that must be non-empty is empty.
    #[error("empty input: {0}")]
    Empty(String),

    /// A tuning parameter is outside its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Not enough samples or checkpoints to run the requested schedule.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),

    /// The checkpoint container's bytes do not follow the documented layout.
    #[error("format violation: {0}")]
    FormatViolation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
