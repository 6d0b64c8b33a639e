//! Error type shared by all modules of the crate.

use crate::measures::GaussianMeasure;

/// Failure modes surfaced by the library.
///
/// Numerical routines return `NoConvergence` with the last iterate attached
/// rather than discarding partial work; everything else is a precondition
/// violation detected up front.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {context} (expected {expected}, found {found})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric: max |M - M^T| entry {asymmetry:.3e}")]
    AsymmetricMatrix { asymmetry: f64 },

    #[error("Wishart degrees of freedom {dof} below dimension {dim}")]
    InvalidDegreesOfFreedom { dim: usize, dof: usize },

    #[error("kernel system is singular and no nugget was supplied")]
    SingularKernelMatrix,

    #[error("fixed-point iteration did not reach tolerance {tol:.3e} in {iterations} steps (last residual {residual:.3e})")]
    NoConvergence {
        iterations: usize,
        tol: f64,
        residual: f64,
        last: Box<GaussianMeasure>,
    },

    #[error("degenerate pair: identical inputs admit no difference quotient")]
    DegeneratePair,

    #[error("selection pool exhausted: requested {requested} from a pool of {pool}")]
    ExhaustedPool { pool: usize, requested: usize },

    #[error("degenerate target: zero mean square over the evaluation ensemble")]
    DegenerateTarget,

    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
