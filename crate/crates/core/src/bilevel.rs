//! Gradient descent on the parametrized bilevel objective over Gaussian
//! training distributions.
//!
//! Each step draws a fresh training batch from the current ν_ϑ, fits the
//! kernel model, solves the adjoint system against the validation ensemble,
//! and assembles the score-function gradient in (mean, Cholesky-factor)
//! coordinates. Per-iteration randomness comes from a stream derived from
//! (seed, iteration), so traces are bitwise reproducible.

use nalgebra::{DMatrix, DVector};

use crate::benchmarks::{err_metric, mean_squared_misfit};
use crate::kernel::{fit_krr, solve_adjoint, KernelModel};
use crate::measures::{gaussian_push, standard_normal_matrix, GaussianMeasure, DIAG_FLOOR};
use crate::rng::SeedStream;
use crate::target::{LabeledEnsemble, Target};
use crate::trace::{flatten_gaussian, gaussian_param_names, OptimizationTrace, TraceRecord};
use crate::{Error, Result};

/// Cosine annealing from `initial` down to `final_value` over `horizon`
/// steps: value(k) = final + ½(initial − final)(1 + cos(πk/horizon)),
/// clamped at `final_value` beyond the horizon.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    initial: f64,
    final_value: f64,
    horizon: usize,
}

impl CosineSchedule {
    pub fn new(initial: f64, final_value: f64, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("schedule horizon must be ≥ 1"));
        }
        if !(initial.is_finite() && final_value.is_finite()) {
            return Err(Error::invalid("schedule endpoints must be finite"));
        }
        if initial < final_value || final_value < 0.0 {
            return Err(Error::invalid(
                "schedule must decay: initial ≥ final ≥ 0",
            ));
        }
        Ok(CosineSchedule {
            initial,
            final_value,
            horizon,
        })
    }

    pub fn constant(value: f64) -> Result<Self> {
        CosineSchedule::new(value, value, 1)
    }

    pub fn value(&self, k: usize) -> f64 {
        let k = k.min(self.horizon);
        let phase = std::f64::consts::PI * k as f64 / self.horizon as f64;
        self.final_value + 0.5 * (self.initial - self.final_value) * (1.0 + phase.cos())
    }

    pub fn initial(&self) -> f64 {
        self.initial
    }

    pub fn final_value(&self) -> f64 {
        self.final_value
    }
}

#[derive(Debug, Clone)]
pub struct BilevelConfig {
    pub iterations: usize,
    pub lr_schedule: CosineSchedule,
    pub nugget_schedule: CosineSchedule,
    /// Training draws per step (N_k, constant across k).
    pub samples_per_step: usize,
    pub lengthscale: f64,
    pub seed: u64,
    /// Divide each gradient by its norm before stepping.
    pub gradient_normalization: bool,
    /// Record measured per-iteration wall time. Off by default so traces
    /// of equal runs stay byte-identical; timing then reads 0.
    pub record_walltime: bool,
}

impl BilevelConfig {
    /// Protocol defaults: lr 1e-2 → 0 and nugget 1e-3 → 1e-7, both cosine
    /// over the full run; 250 draws per step.
    pub fn standard(iterations: usize, lengthscale: f64, seed: u64) -> Self {
        let horizon = iterations.max(1);
        BilevelConfig {
            iterations,
            lr_schedule: CosineSchedule::new(1e-2, 0.0, horizon).expect("static schedule"),
            nugget_schedule: CosineSchedule::new(1e-3, 1e-7, horizon).expect("static schedule"),
            samples_per_step: 250,
            lengthscale,
            seed,
            gradient_normalization: false,
            record_walltime: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_step < 2 {
            return Err(Error::invalid("samples_per_step must be ≥ 2"));
        }
        if self.lengthscale <= 0.0 || self.lengthscale.is_nan() {
            return Err(Error::invalid("lengthscale must be positive"));
        }
        Ok(())
    }
}

/// Objective gradient in (mean, Cholesky factor) coordinates; the factor
/// block is lower triangular like the iterate it updates.
#[derive(Debug, Clone)]
pub struct GaussianGradient {
    pub mean: DVector<f64>,
    pub cov_factor: DMatrix<f64>,
}

impl GaussianGradient {
    pub fn zeros(d: usize) -> Self {
        GaussianGradient {
            mean: DVector::zeros(d),
            cov_factor: DMatrix::zeros(d, d),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.mean.norm_squared() + self.cov_factor.norm_squared()).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        GaussianGradient {
            mean: &self.mean * s,
            cov_factor: &self.cov_factor * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite()) && self.cov_factor.iter().all(|v| v.is_finite())
    }
}

/// Replaces every diagonal entry of the lower-triangular factor with
/// max(entry, 1e-7); off-diagonal entries pass through.
pub fn project_psd(l: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = l.clone();
    for i in 0..out.nrows().min(out.ncols()) {
        out[(i, i)] = out[(i, i)].max(DIAG_FLOOR);
    }
    out
}

/// Score-function gradient estimate from a pinned standard-normal batch `z`
/// (one row per training point): pushes z through ϑ, fits, solves the
/// adjoint against the validation ensemble, and averages
/// residual·λ·∇_ϑ log p_ϑ over the batch. Returns the fitted model too, so
/// callers can evaluate the same iterate without refitting.
pub fn bilevel_gradient_from_draws(
    params: &GaussianMeasure,
    target: &impl Target,
    validation: &LabeledEnsemble,
    z: &DMatrix<f64>,
    nugget: f64,
    lengthscale: f64,
) -> Result<(GaussianGradient, KernelModel)> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::invalid("gradient estimate needs N ≥ 2 draws"));
    }
    let u = gaussian_push(params, z)?;
    let labels = DVector::from_fn(n, |i, _| target.eval(&u.point(i)));
    let model = fit_krr(u.points(), &labels, lengthscale, nugget)?;
    let lambda = solve_adjoint(&model, validation.ensemble(), validation.labels(), nugget)?;
    let preds = model.predict(u.points())?;
    let mut grad = GaussianGradient::zeros(params.dim());
    for i in 0..n {
        let a = (preds[i] - labels[i]) * lambda[i];
        if a != 0.0 {
            let ui = u.point(i);
            grad.mean.axpy(a, &params.score_mean(&ui), 1.0);
            grad.cov_factor += params.score_cholesky(&ui) * a;
        }
    }
    let inv = 1.0 / n as f64;
    Ok((grad.scaled(inv), model))
}

/// As [`bilevel_gradient_from_draws`], with the batch drawn from `rng`.
pub fn bilevel_gradient(
    params: &GaussianMeasure,
    target: &impl Target,
    validation: &LabeledEnsemble,
    n: usize,
    nugget: f64,
    lengthscale: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<GaussianGradient> {
    let z = standard_normal_matrix(n, params.dim(), rng);
    bilevel_gradient_from_draws(params, target, validation, &z, nugget, lengthscale)
        .map(|(g, _)| g)
}

fn err_or_nan(model: &KernelModel, labeled: &LabeledEnsemble) -> Result<f64> {
    match err_metric(model, labeled) {
        Ok(v) => Ok(v),
        // a target that is zero on the split makes the relative metric
        // undefined; the run itself stays meaningful
        Err(Error::DegenerateTarget) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Runs the descent: ϑ_{k+1} = project(ϑ_k − t_k ∇̂J(ϑ_k)).
///
/// The trace holds one record per iterate, including the initial one
/// (`iterations + 1` records on a clean run); record k carries ϑ_k, the
/// validation misfit and both Err columns of the model fitted at ϑ_k, and
/// the gradient norm at ϑ_k. A non-finite gradient or objective stops the
/// run early, leaving the offending diagnostic record in place.
pub fn run_bilevel(
    config: &BilevelConfig,
    target: &impl Target,
    validation: &LabeledEnsemble,
    test: &LabeledEnsemble,
    theta0: &GaussianMeasure,
) -> Result<OptimizationTrace> {
    config.validate()?;
    let d = theta0.dim();
    let mut trace = OptimizationTrace::new(gaussian_param_names(d));
    let mut theta = theta0.clone();
    let root = SeedStream::new(config.seed);
    let started = std::time::Instant::now();
    for k in 0..=config.iterations {
        let mut rng = root.derive(k as u64).rng();
        let z = standard_normal_matrix(config.samples_per_step, d, &mut rng);
        let nugget = config.nugget_schedule.value(k);
        let (grad, model) =
            bilevel_gradient_from_draws(&theta, target, validation, &z, nugget, config.lengthscale)?;
        let objective = mean_squared_misfit(&model, validation)?;
        let grad_norm = grad.norm();
        let record = TraceRecord {
            iter: k,
            objective,
            objective_se: 0.0,
            err_seen: err_or_nan(&model, validation)?,
            err_unseen: err_or_nan(&model, test)?,
            grad_norm,
            wall_ms: if config.record_walltime {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
            params: flatten_gaussian(&theta),
        };
        trace.push(record);
        if !grad.is_finite() || !objective.is_finite() {
            break;
        }
        if k < config.iterations {
            let step = if config.gradient_normalization && grad_norm > 0.0 {
                grad.scaled(1.0 / grad_norm)
            } else {
                grad
            };
            let t = config.lr_schedule.value(k);
            let mean = theta.mean() - &step.mean * t;
            let factor = project_psd(&(theta.cov_factor() - &step.cov_factor * t));
            theta = GaussianMeasure::new(mean, factor)?;
        }
    }
    Ok(trace)
}
