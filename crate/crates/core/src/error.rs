use thiserror::Error;

/// Errors raised by model construction, feature evaluation and inference.
#[derive(Debug, Error)]
pub enum LfmError {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid dataset entry {index}: {reason}")]
    InvalidData { index: usize, reason: String },

    #[error("parse error on line {line}: {reason}")]
    Parse { line: u64, reason: String },

    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value {value} at parameter index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("roots {0} and {1} are not separated (|difference| below threshold)")]
    RootSeparation(String, String),

    #[error("root finding failed: {0}")]
    RootFinding(String),

    #[error("quadrature did not converge: estimated error {error:e} above tolerance {tol:e}")]
    Quadrature { error: f64, tol: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("{0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LfmError>;
