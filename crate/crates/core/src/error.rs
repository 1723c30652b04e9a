use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: String },

    #[error("system is not stable: spectral radius {spectral_radius} >= 1")]
    Unstable { spectral_radius: f64 },

    #[error("fixed-point iteration did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("invalid model:\n{0}")]
    InvalidModel(ValidationReport),

    #[error("innovation covariance W_k is singular; every dropped sensor needs a strictly positive trigger block")]
    SingularInnovation,

    #[error("communication rate {0} is unreachable (must lie in [0, 1))")]
    UnreachableRate(f64),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
