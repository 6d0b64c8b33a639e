//! Squared-exponential RKHS hypothesis class: kernel ridge regression,
//! adjoint-state solves against deployment ensembles, and Lipschitz
//! estimation from sampled pairs.
//!
//! The fitted system matrix κ(U,U) + Nσ²I is factored once per fit; the
//! factorization rides along inside [`KernelModel`] so the adjoint solve at
//! the same (centers, lengthscale, nugget) reuses it instead of refactoring.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::measures::MetaTestEnsemble;
use crate::{Error, Result};

/// κ(x, y) = exp(−‖x−y‖² / ℓ²).
pub fn kernel_eval(x: &DVector<f64>, y: &DVector<f64>, lengthscale: f64) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    debug_assert!(lengthscale > 0.0);
    let mut sq = 0.0;
    for k in 0..x.len() {
        let d = x[k] - y[k];
        sq += d * d;
    }
    (-sq / (lengthscale * lengthscale)).exp()
}

/// Pairwise squared distances between row-sets `a` (n×d) and `b` (m×d),
/// assembled through one matrix product; entries clamped at 0.
pub fn cross_sq_dists(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.ncols(), b.ncols());
    let an: Vec<f64> = (0..a.nrows()).map(|i| a.row(i).norm_squared()).collect();
    let bn: Vec<f64> = (0..b.nrows()).map(|j| b.row(j).norm_squared()).collect();
    let mut g = a * b.transpose();
    for j in 0..g.ncols() {
        for i in 0..g.nrows() {
            g[(i, j)] = (an[i] + bn[j] - 2.0 * g[(i, j)]).max(0.0);
        }
    }
    g
}

/// Kernel cross matrix [κ(a_i, b_j)]_{ij}.
pub fn kernel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, lengthscale: f64) -> DMatrix<f64> {
    let inv = 1.0 / (lengthscale * lengthscale);
    let mut m = cross_sq_dists(a, b);
    for v in m.iter_mut() {
        *v = (-*v * inv).exp();
    }
    m
}

/// Kernel expansion Ĝ = Σ β_n κ(·, c_n) with the ridge it was fitted under.
#[derive(Debug, Clone)]
pub struct KernelModel {
    centers: DMatrix<f64>,
    coefficients: DVector<f64>,
    lengthscale: f64,
    nugget: f64,
    factor: Option<Cholesky<f64, Dyn>>,
}

impl KernelModel {
    /// Model from explicit coefficients (no cached factorization).
    pub fn new(
        centers: DMatrix<f64>,
        coefficients: DVector<f64>,
        lengthscale: f64,
        nugget: f64,
    ) -> Result<Self> {
        if centers.nrows() == 0 {
            return Err(Error::invalid("kernel model needs at least one center"));
        }
        if coefficients.len() != centers.nrows() {
            return Err(Error::DimensionMismatch {
                context: "kernel coefficient count",
                expected: centers.nrows(),
                found: coefficients.len(),
            });
        }
        if lengthscale <= 0.0 || lengthscale.is_nan() {
            return Err(Error::invalid(format!("lengthscale must be positive, got {lengthscale}")));
        }
        if nugget < 0.0 || nugget.is_nan() {
            return Err(Error::invalid(format!("nugget must be nonnegative, got {nugget}")));
        }
        Ok(KernelModel {
            centers,
            coefficients,
            lengthscale,
            nugget,
            factor: None,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // N ≥ 1 by construction
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.coefficients
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    /// Predictions at the rows of `points`.
    pub fn predict(&self, points: &DMatrix<f64>) -> Result<DVector<f64>> {
        if points.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "prediction point dimension",
                expected: self.dim(),
                found: points.ncols(),
            });
        }
        Ok(kernel_matrix(points, &self.centers, self.lengthscale) * &self.coefficients)
    }

    /// Prediction at a single point.
    pub fn predict_one(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "prediction point dimension",
                expected: self.dim(),
                found: x.len(),
            });
        }
        let mut acc = 0.0;
        for n in 0..self.len() {
            acc += self.coefficients[n] * kernel_eval(x, &self.centers.row(n).transpose(), self.lengthscale);
        }
        Ok(acc)
    }

    /// Analytic gradient ∇ŷ(x) = Σ β_n κ(x,c_n)·(−2/ℓ²)(x − c_n).
    pub fn predict_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "gradient point dimension",
                expected: self.dim(),
                found: x.len(),
            });
        }
        let mut acc = DVector::zeros(self.dim());
        for n in 0..self.len() {
            let c = self.centers.row(n).transpose();
            let w = self.coefficients[n] * kernel_eval(x, &c, self.lengthscale);
            acc += (x - c) * w;
        }
        Ok(acc * (-2.0 / (self.lengthscale * self.lengthscale)))
    }
}

fn regularized_gram(points: &DMatrix<f64>, lengthscale: f64, nugget: f64) -> DMatrix<f64> {
    let n = points.nrows();
    let mut a = kernel_matrix(points, points, lengthscale);
    let ridge = n as f64 * nugget;
    for i in 0..n {
        a[(i, i)] += ridge;
    }
    a
}

/// Kernel ridge regression: β = (κ(X,X) + Nσ²I)⁻¹ y via Cholesky.
pub fn fit_krr(
    points: &DMatrix<f64>,
    labels: &DVector<f64>,
    lengthscale: f64,
    nugget: f64,
) -> Result<KernelModel> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::invalid("kernel fit needs at least one point"));
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            context: "kernel label count",
            expected: n,
            found: labels.len(),
        });
    }
    if lengthscale <= 0.0 || lengthscale.is_nan() {
        return Err(Error::invalid(format!("lengthscale must be positive, got {lengthscale}")));
    }
    if nugget < 0.0 || nugget.is_nan() {
        return Err(Error::invalid(format!("nugget must be nonnegative, got {nugget}")));
    }
    let a = regularized_gram(points, lengthscale, nugget);
    let factor = Cholesky::new(a).ok_or(Error::SingularKernelMatrix)?;
    let coefficients = factor.solve(labels);
    Ok(KernelModel {
        centers: points.clone(),
        coefficients,
        lengthscale,
        nugget,
        factor: Some(factor),
    })
}

/// Adjoint state λ = (κ(U,U) + Nσ²I)⁻¹ · N Σ_j w_j (1/M_j) κ(U,V^j)(G*(V^j) − Ĝ(V^j)),
/// U being the model's centers. With uniform ensemble weights w_j = 1/J this is
/// the (N/J) Σ_j (1/M_j) form. Reuses the fit factorization when `nugget`
/// matches the one the model was fitted with.
pub fn solve_adjoint(
    model: &KernelModel,
    qhat: &MetaTestEnsemble,
    target_values: &[DVector<f64>],
    nugget: f64,
) -> Result<DVector<f64>> {
    if qhat.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "adjoint ensemble dimension",
            expected: model.dim(),
            found: qhat.dim(),
        });
    }
    if target_values.len() != qhat.len() {
        return Err(Error::DimensionMismatch {
            context: "adjoint target-atom count",
            expected: qhat.len(),
            found: target_values.len(),
        });
    }
    let n = model.len();
    let mut rhs = DVector::zeros(n);
    for ((atom, w), targets) in qhat.iter().zip(target_values) {
        let atom = atom.as_empirical().ok_or_else(|| {
            Error::UnsupportedConfiguration("adjoint solve needs empirical atoms".into())
        })?;
        if targets.len() != atom.len() {
            return Err(Error::DimensionMismatch {
                context: "adjoint target-value count",
                expected: atom.len(),
                found: targets.len(),
            });
        }
        let cross = kernel_matrix(&model.centers, atom.points(), model.lengthscale);
        let residual = targets - &cross.transpose() * &model.coefficients;
        rhs += cross * residual * (n as f64 * w / atom.len() as f64);
    }
    if nugget == model.nugget {
        if let Some(factor) = &model.factor {
            return Ok(factor.solve(&rhs));
        }
    }
    let a = regularized_gram(&model.centers, model.lengthscale, nugget);
    let factor = Cholesky::new(a).ok_or(Error::SingularKernelMatrix)?;
    Ok(factor.solve(&rhs))
}

/// Max difference quotient |f(a) − f(b)| / ‖a − b‖ over the supplied pairs;
/// a lower bound on the true Lipschitz constant.
pub fn lipschitz_estimate(
    f: impl Fn(&DVector<f64>) -> f64,
    pairs: &[(DVector<f64>, DVector<f64>)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("Lipschitz estimate needs at least one pair"));
    }
    let mut best = 0.0f64;
    for (a, b) in pairs {
        let gap = (a - b).norm();
        if gap == 0.0 {
            return Err(Error::DegeneratePair);
        }
        best = best.max((f(a) - f(b)).abs() / gap);
    }
    Ok(best)
}
