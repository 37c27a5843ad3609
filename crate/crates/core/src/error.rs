use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square: {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix contains a non-finite entry")]
    NonFinite,

    #[error("matrix is not symmetric: max |A - A'| = {max_asym:.3e}")]
    NotSymmetric { max_asym: f64 },

    #[error("matrix is not positive definite: min eigenvalue {min_eigenvalue:.6e}")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("matrix is not positive semidefinite: min eigenvalue {min_eigenvalue:.6e}")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    /// Raised wherever a Cholesky factorization is required but fails. For
    /// sample covariances this is the signal that a singular matrix (q >= 1)
    /// was passed where invertibility is required.
    #[error("singular or indefinite matrix")]
    SingularOrIndefinite,

    #[error("eigenvalue solver did not converge for a {dim}x{dim} matrix")]
    EigenNonConvergence { dim: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("oracle eigenvalue {index} is {value:.3e}, at or below the positivity floor 1e-12")]
    OracleEigenvalueFloor { index: usize, value: f64 },

    #[error("sampler produced a numerically singular matrix even after one retry")]
    DegenerateSample,

    #[error("replicate {replicate} failed: {source}")]
    ReplicateFailed {
        replicate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
