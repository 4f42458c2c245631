use thiserror::Error;

/// Errors produced by fitting, derivative, and test routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("design matrix is rank deficient (rank {rank} of {cols} columns)")]
    SingularDesign { rank: usize, cols: usize },

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("degenerate estimator: {0}")]
    Degenerate(String),

    #[error("empty kernel neighborhood at the query point")]
    EmptyNeighborhood,

    #[error("no out-of-bag observation shares a leaf with the query point")]
    NoOobWeight,

    #[error("negative variance estimate {value:.6e} at query {index}")]
    NegativeVariance { index: usize, value: f64 },

    #[error("covariance matrix unusable for testing (condition number {cond:.3e})")]
    SingularCovariance { cond: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
