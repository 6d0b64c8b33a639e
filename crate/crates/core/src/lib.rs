//! Training-distribution design for regression models that are deployed on
//! inputs drawn from distributions other than the one they were trained on.
//!
//! The library covers the full pipeline:
//!
//! * [`measures`]: Gaussian and empirical measures, meta ensembles of
//!   deployment distributions, score functions, Wishart draws.
//! * [`transport`]: quadratic Wasserstein machinery (closed-form Gaussian
//!   distances and maps, exact empirical matching, barycenters).
//! * [`kernel`]: squared-exponential kernel ridge regression with cached
//!   factorizations, adjoint solves, and Lipschitz estimation.
//! * [`bilevel`]: stochastic bilevel descent on the parameters of a Gaussian
//!   training distribution.
//! * [`ama`]: alternating minimization of an upper bound on the deployment
//!   error, in Gaussian-parametric and particle forms.
//! * [`benchmarks`]: analytic target functions, meta-test ensembles, error
//!   metrics, baseline distributions, and core-set selection.
//!
//! Every randomized operation takes an explicit seeded stream; there is no
//! global RNG state anywhere in the crate.

pub mod ama;
pub mod benchmarks;
pub mod bilevel;
pub mod error;
pub mod kernel;
pub mod measures;
pub mod rng;
pub mod target;
pub mod trace;
pub mod transport;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Library version, exposed for experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
