use thiserror::Error;

use crate::solver::Solution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eig:e}, tolerance {tol:e})")]
    NotPsd { min_eig: f64, tol: f64 },

    #[error("matrix is singular or not positive definite: {0}")]
    SingularMatrix(String),

    #[error("matrix is not symmetric (asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    /// The mean-zero constraint cannot be met: 0 is not in the interior of the
    /// convex hull of the covariate support.
    #[error("constraint infeasible: {0}")]
    ConstraintInfeasible(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    /// The outer solver ran out of sweeps. The partial solution is attached.
    #[error("solver did not converge within {} sweeps", .0.report.sweeps)]
    NotConverged(Box<Solution>),

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("instance too large for the oracle: n*m = {size} exceeds {limit}")]
    SizeGuard { size: usize, limit: usize },

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
