use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum KmsError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("sample size mismatch: x has {nx} points, y has {ny}; subsample to equal sizes")]
    SampleSizeMismatch { nx: usize, ny: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("duplicate sample points ({first} and {second} coincide); the gaussian gram matrix requires pairwise distinct points")]
    DuplicatePoints { first: usize, second: usize },

    #[error("gram matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e}); points must be pairwise distinct")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl KmsError {
    /// Whether this error stems from a violated numerical precondition
    /// (as opposed to bad input or a solver breakdown).
    pub fn is_precondition(&self) -> bool {
        matches!(
            self,
            KmsError::DuplicatePoints { .. }
                | KmsError::NotPositiveDefinite { .. }
                | KmsError::SampleSizeMismatch { .. }
                | KmsError::DimensionMismatch { .. }
                | KmsError::Degenerate(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, KmsError>;
