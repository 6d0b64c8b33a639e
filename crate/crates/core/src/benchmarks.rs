//! Function-approximation test bed: the four benchmark targets, deployment
//! ensemble generation, the relative OOD error metric, baseline training
//! distributions, and greedy coreset selection.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::kernel::{kernel_eval, kernel_matrix, KernelModel};
use crate::measures::{
    sample_gaussian, sample_wishart, EmpiricalMeasure, GaussianMeasure, MeasureAtom,
    MetaTestEnsemble,
};
use crate::rng::SeedStream;
use crate::target::{LabeledEnsemble, Target};
use crate::transport::{gaussian_barycenter, sample_mixture};
use crate::{Error, Result};

pub const G4_TERMS: usize = 1000;
pub const G4_LENGTHSCALE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    G1,
    G2,
    G3,
    G4,
}

impl TargetKind {
    pub fn name(self) -> &'static str {
        match self {
            TargetKind::G1 => "g1",
            TargetKind::G2 => "g2",
            TargetKind::G3 => "g3",
            TargetKind::G4 => "g4",
        }
    }

    /// Kernel lengthscale used for this target throughout the experiments.
    pub fn lengthscale(self) -> f64 {
        match self {
            TargetKind::G1 => 1.0,
            TargetKind::G2 => 3.0,
            TargetKind::G3 => 2.0 / 1.1,
            TargetKind::G4 => 5.0,
        }
    }
}

impl std::str::FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g1" => Ok(TargetKind::G1),
            "g2" => Ok(TargetKind::G2),
            "g3" => Ok(TargetKind::G3),
            "g4" => Ok(TargetKind::G4),
            other => Err(Error::invalid(format!("unknown target id {other:?}"))),
        }
    }
}

/// One of the benchmark targets, fixed at construction.
///
/// g4 is a random kernel expansion; its coefficients and centers are drawn
/// once from the seed (per term: coefficient, then center coordinates).
#[derive(Debug, Clone)]
pub struct TargetFunction {
    kind: TargetKind,
    dim: usize,
    g4_centers: Option<DMatrix<f64>>,
    g4_coefficients: Option<DVector<f64>>,
}

impl TargetFunction {
    pub fn new(kind: TargetKind, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("target dimension must be ≥ 1"));
        }
        match kind {
            TargetKind::G2 if dim < 5 => {
                return Err(Error::invalid("g2 reads 5 coordinates; need d ≥ 5"))
            }
            TargetKind::G3 if dim < 4 => {
                return Err(Error::invalid("g3 reads 4 coordinates; need d ≥ 4"))
            }
            _ => {}
        }
        let (g4_centers, g4_coefficients) = if kind == TargetKind::G4 {
            let mut rng = SeedStream::new(seed).rng();
            let mut centers = DMatrix::zeros(G4_TERMS, dim);
            let mut coeff = DVector::zeros(G4_TERMS);
            for l in 0..G4_TERMS {
                coeff[l] = rng.gen_range(-1.0..1.0);
                for j in 0..dim {
                    centers[(l, j)] = rng.gen_range(-4.0..4.0);
                }
            }
            (Some(centers), Some(coeff))
        } else {
            (None, None)
        };
        Ok(TargetFunction {
            kind,
            dim,
            g4_centers,
            g4_coefficients,
        })
    }

    /// g4 variant with explicit terms, for tests and custom expansions.
    pub fn g4_with_terms(centers: DMatrix<f64>, coefficients: DVector<f64>) -> Result<Self> {
        if centers.nrows() == 0 || centers.nrows() != coefficients.len() {
            return Err(Error::DimensionMismatch {
                context: "g4 term count",
                expected: centers.nrows(),
                found: coefficients.len(),
            });
        }
        Ok(TargetFunction {
            kind: TargetKind::G4,
            dim: centers.ncols(),
            g4_centers: Some(centers),
            g4_coefficients: Some(coefficients),
        })
    }

    pub fn kind(&self) -> TargetKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mean of the Normal baseline N(m₀, I): the origin for g1, ½·1 otherwise.
    pub fn normal_baseline_mean(&self) -> DVector<f64> {
        match self.kind {
            TargetKind::G1 => DVector::zeros(self.dim),
            _ => DVector::from_element(self.dim, 0.5),
        }
    }
}

impl Target for TargetFunction {
    fn eval(&self, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.dim, "target input dimension");
        match self.kind {
            TargetKind::G1 => {
                let mut prod = 1.0;
                for j in 1..=self.dim {
                    let a = (j as f64 - 2.0) / 2.0;
                    prod *= ((4.0 * x[j - 1] - 2.0).abs() + a) / (1.0 + a);
                }
                prod
            }
            TargetKind::G2 => {
                10.0 * (std::f64::consts::PI * x[0] * x[1]).sin()
                    + 20.0 * (x[2] - 0.5) * (x[2] - 0.5)
                    + 10.0 * x[3]
                    + 5.0 * x[4]
            }
            TargetKind::G3 => {
                let t = 520.0 * std::f64::consts::PI * x[1] + 40.0 * std::f64::consts::PI;
                let mut denom = t * (10.0 * x[3] + 1.0);
                if denom.abs() < 1e-12 {
                    denom = if denom < 0.0 { -1e-12 } else { 1e-12 };
                }
                let a = 100.0 * x[0];
                let b = x[2] * t - 1.0 / denom;
                (a * a + b * b).sqrt()
            }
            TargetKind::G4 => {
                let centers = self.g4_centers.as_ref().expect("g4 terms");
                let coeff = self.g4_coefficients.as_ref().expect("g4 terms");
                let mut acc = 0.0;
                for l in 0..centers.nrows() {
                    acc += coeff[l] * kernel_eval(x, &centers.row(l).transpose(), G4_LENGTHSCALE);
                }
                acc
            }
        }
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            TargetKind::G2 => {
                let mut g = DVector::zeros(self.dim);
                let pi = std::f64::consts::PI;
                let c = 10.0 * pi * (pi * x[0] * x[1]).cos();
                g[0] = c * x[1];
                g[1] = c * x[0];
                g[2] = 40.0 * (x[2] - 0.5);
                g[3] = 10.0;
                g[4] = 5.0;
                g
            }
            TargetKind::G4 => {
                let centers = self.g4_centers.as_ref().expect("g4 terms");
                let coeff = self.g4_coefficients.as_ref().expect("g4 terms");
                let mut acc = DVector::zeros(self.dim);
                for l in 0..centers.nrows() {
                    let c = centers.row(l).transpose();
                    let w = coeff[l] * kernel_eval(x, &c, G4_LENGTHSCALE);
                    acc += (x - c) * w;
                }
                acc * (-2.0 / (G4_LENGTHSCALE * G4_LENGTHSCALE))
            }
            // kinked (g1) and piecewise-guarded (g3) targets fall back to
            // the finite-difference default
            _ => fallback_gradient(self, x),
        }
    }
}

fn fallback_gradient(t: &impl Target, x: &DVector<f64>) -> DVector<f64> {
    struct Fd<'a, T: Target>(&'a T);
    impl<T: Target> Target for Fd<'_, T> {
        fn eval(&self, u: &DVector<f64>) -> f64 {
            self.0.eval(u)
        }
    }
    Fd(t).gradient(x)
}

/// A drawn deployment family: the Gaussian atoms, their sample clouds, and
/// the validation/test split of each cloud.
#[derive(Debug, Clone)]
pub struct MetaEnsembleDraw {
    pub gaussians: MetaTestEnsemble,
    pub samples: MetaTestEnsemble,
    pub validation: MetaTestEnsemble,
    pub test: MetaTestEnsemble,
    /// Leading points of each cloud that form the validation part.
    pub validation_count: usize,
}

/// Draws K atoms m'_k ~ N(0, I_d), C'_k ~ Wishart(I_d, d+1), samples M
/// points from each, and splits the leading tenth (at least 1, at most M−1)
/// off as validation. Atom parameters are drawn before any points, so the
/// ensemble is unchanged by M under a fixed rng stream.
pub fn make_meta_ensemble(
    k: usize,
    d: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MetaEnsembleDraw> {
    if k == 0 {
        return Err(Error::invalid("ensemble needs at least one atom"));
    }
    if m < 2 {
        return Err(Error::invalid(
            "need at least 2 samples per atom to split validation from test",
        ));
    }
    let mut gaussians = Vec::with_capacity(k);
    for _ in 0..k {
        let mean = DVector::from_fn(d, |_, _| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        });
        let cov = sample_wishart(d, d + 1, rng)?;
        gaussians.push(GaussianMeasure::from_covariance(mean, cov)?);
    }
    let validation_count = ((m as f64 / 10.0).round() as usize).clamp(1, m - 1);
    let mut samples = Vec::with_capacity(k);
    let mut validation = Vec::with_capacity(k);
    let mut test = Vec::with_capacity(k);
    for g in &gaussians {
        let cloud = sample_gaussian(g, m, rng)?;
        let pts = cloud.points();
        validation.push(MeasureAtom::Empirical(EmpiricalMeasure::new(
            pts.rows(0, validation_count).into_owned(),
        )?));
        test.push(MeasureAtom::Empirical(EmpiricalMeasure::new(
            pts.rows(validation_count, m - validation_count).into_owned(),
        )?));
        samples.push(MeasureAtom::Empirical(cloud));
    }
    Ok(MetaEnsembleDraw {
        gaussians: MetaTestEnsemble::uniform(
            gaussians.into_iter().map(MeasureAtom::Gaussian).collect(),
        )?,
        samples: MetaTestEnsemble::uniform(samples)?,
        validation: MetaTestEnsemble::uniform(validation)?,
        test: MetaTestEnsemble::uniform(test)?,
        validation_count,
    })
}

/// Root relative average OOD error:
/// sqrt( Σ_k w_k mean_n (y − ŷ)² / Σ_k w_k mean_n y² ).
pub fn err_metric(model: &KernelModel, labeled: &LabeledEnsemble) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((atom, w), labels) in labeled.ensemble().iter().zip(labeled.labels()) {
        let atom = atom.as_empirical().expect("labeled atoms are empirical");
        let pred = model.predict(atom.points())?;
        let mut sq_res = 0.0;
        let mut sq_lab = 0.0;
        for i in 0..labels.len() {
            let r = labels[i] - pred[i];
            sq_res += r * r;
            sq_lab += labels[i] * labels[i];
        }
        let inv = 1.0 / labels.len() as f64;
        num += w * sq_res * inv;
        den += w * sq_lab * inv;
    }
    if den <= 0.0 {
        return Err(Error::DegenerateTarget);
    }
    Ok((num / den).sqrt())
}

/// Weighted mean squared misfit Σ_k w_k mean_n (y − ŷ)² (the unnormalized
/// numerator of [`err_metric`]).
pub fn mean_squared_misfit(model: &KernelModel, labeled: &LabeledEnsemble) -> Result<f64> {
    let mut acc = 0.0;
    for ((atom, w), labels) in labeled.ensemble().iter().zip(labeled.labels()) {
        let atom = atom.as_empirical().expect("labeled atoms are empirical");
        let pred = model.predict(atom.points())?;
        let mut sq = 0.0;
        for i in 0..labels.len() {
            let r = labels[i] - pred[i];
            sq += r * r;
        }
        acc += w * sq / labels.len() as f64;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Normal,
    Barycenter,
    Mixture,
    Uniform,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(BaselineKind::Normal),
            "barycenter" => Ok(BaselineKind::Barycenter),
            "mixture" => Ok(BaselineKind::Mixture),
            "uniform" => Ok(BaselineKind::Uniform),
            other => Err(Error::invalid(format!("unknown baseline {other:?}"))),
        }
    }
}

/// A training distribution that can be sampled wherever ν_ϑ is.
#[derive(Debug, Clone)]
pub enum TrainingSampler {
    Gaussian(GaussianMeasure),
    GaussianMixture(MetaTestEnsemble),
    UniformCube { dim: usize },
}

impl TrainingSampler {
    pub fn dim(&self) -> usize {
        match self {
            TrainingSampler::Gaussian(g) => g.dim(),
            TrainingSampler::GaussianMixture(q) => q.dim(),
            TrainingSampler::UniformCube { dim } => *dim,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<EmpiricalMeasure> {
        match self {
            TrainingSampler::Gaussian(g) => sample_gaussian(g, n, rng),
            TrainingSampler::GaussianMixture(q) => sample_mixture(q, n, rng),
            TrainingSampler::UniformCube { dim } => {
                if n == 0 {
                    return Err(Error::invalid("sample count must be ≥ 1"));
                }
                let mut pts = DMatrix::zeros(n, *dim);
                for i in 0..n {
                    for j in 0..*dim {
                        pts[(i, j)] = rng.gen::<f64>();
                    }
                }
                EmpiricalMeasure::new(pts)
            }
        }
    }
}

/// Gaussian fitted to each empirical atom (sample mean, population covariance).
fn fitted_atom_gaussians(samples: &MetaTestEnsemble) -> Result<Vec<GaussianMeasure>> {
    samples
        .atoms()
        .iter()
        .map(|atom| {
            let e = atom.as_empirical().ok_or_else(|| {
                Error::UnsupportedConfiguration("baseline fitting needs empirical atoms".into())
            })?;
            GaussianMeasure::from_covariance(e.mean(), e.covariance())
        })
        .collect()
}

/// One of the reference training distributions. `samples` is the drawn
/// deployment ensemble; Barycenter and Mixture fit a Gaussian to each atom's
/// cloud and combine those.
pub fn baseline_distribution(
    kind: BaselineKind,
    target: &TargetFunction,
    samples: &MetaTestEnsemble,
) -> Result<TrainingSampler> {
    match kind {
        BaselineKind::Normal => Ok(TrainingSampler::Gaussian(GaussianMeasure::new(
            target.normal_baseline_mean(),
            DMatrix::identity(target.dim(), target.dim()),
        )?)),
        BaselineKind::Uniform => Ok(TrainingSampler::UniformCube { dim: target.dim() }),
        BaselineKind::Barycenter => {
            let fitted = fitted_atom_gaussians(samples)?;
            let q = MetaTestEnsemble::new(
                fitted.into_iter().map(MeasureAtom::Gaussian).collect(),
                samples.weights().to_vec(),
            )?;
            let bary = gaussian_barycenter(&q, 1e-10, 500)?;
            Ok(TrainingSampler::Gaussian(bary))
        }
        BaselineKind::Mixture => {
            let fitted = fitted_atom_gaussians(samples)?;
            let q = MetaTestEnsemble::new(
                fitted.into_iter().map(MeasureAtom::Gaussian).collect(),
                samples.weights().to_vec(),
            )?;
            Ok(TrainingSampler::GaussianMixture(q))
        }
    }
}

/// Greedy maxmin (k-center) expansion of `init` to `k` total indices:
/// repeatedly add the pool element farthest from the current selection,
/// breaking ties by lowest index.
pub fn coreset_select<F>(
    pool: &[F],
    k: usize,
    init: &[usize],
    metric: impl Fn(&F, &F) -> f64,
) -> Result<Vec<usize>> {
    if init.is_empty() {
        return Err(Error::invalid("coreset needs a nonempty initial selection"));
    }
    if k > pool.len() {
        return Err(Error::ExhaustedPool {
            pool: pool.len(),
            requested: k,
        });
    }
    if k < init.len() {
        return Err(Error::invalid("coreset budget below initial selection size"));
    }
    let mut selected = Vec::with_capacity(k);
    let mut in_set = vec![false; pool.len()];
    for &i in init {
        if i >= pool.len() {
            return Err(Error::invalid(format!("initial index {i} out of pool")));
        }
        if in_set[i] {
            return Err(Error::invalid(format!("initial index {i} repeated")));
        }
        in_set[i] = true;
        selected.push(i);
    }
    let mut min_dist = vec![f64::INFINITY; pool.len()];
    for i in 0..pool.len() {
        for &s in &selected {
            min_dist[i] = min_dist[i].min(metric(&pool[i], &pool[s]));
        }
    }
    while selected.len() < k {
        let mut best = usize::MAX;
        let mut best_dist = f64::NEG_INFINITY;
        for i in 0..pool.len() {
            if !in_set[i] && min_dist[i] > best_dist {
                best = i;
                best_dist = min_dist[i];
            }
        }
        in_set[best] = true;
        selected.push(best);
        for i in 0..pool.len() {
            if !in_set[i] {
                min_dist[i] = min_dist[i].min(metric(&pool[i], &pool[best]));
            }
        }
    }
    Ok(selected)
}

/// Distance between kernel sections, ‖κ(·,a) − κ(·,b)‖_κ = sqrt(2(1 − κ(a,b))).
pub fn rkhs_point_distance(a: &DVector<f64>, b: &DVector<f64>, lengthscale: f64) -> f64 {
    (2.0 * (1.0 - kernel_eval(a, b, lengthscale))).max(0.0).sqrt()
}

/// Nonadaptive coreset: grow a single random index to `n` pool indices,
/// point by point, under the kernel-section metric.
pub fn ncoreset_indices<R: Rng + ?Sized>(
    pool: &EmpiricalMeasure,
    n: usize,
    lengthscale: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let init = [rng.gen_range(0..pool.len())];
    let rows: Vec<DVector<f64>> = (0..pool.len()).map(|i| pool.point(i)).collect();
    coreset_select(&rows, n, &init, |a, b| rkhs_point_distance(a, b, lengthscale))
}

const ACORESET_INIT: usize = 6;
const ACORESET_BATCH: usize = 10;
const SKETCH_THRESHOLD: usize = 256;
const SKETCH_DIM: usize = 32;

/// Adaptive coreset: start from 6 random indices, then alternate fitting a
/// model on the labeled selection with greedy batches of 10 under the
/// Euclidean metric on feature vectors {β_n κ(u_n, v_m)}_n. Features wider
/// than 256 are compressed by a fresh Gaussian sketch to dimension 32.
pub fn acoreset_indices<R: Rng + ?Sized>(
    pool: &EmpiricalMeasure,
    n: usize,
    lengthscale: f64,
    target: &impl Target,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let init_size = ACORESET_INIT.min(n).min(pool.len());
    let mut selected = Vec::with_capacity(n);
    while selected.len() < init_size {
        let i = rng.gen_range(0..pool.len());
        if !selected.contains(&i) {
            selected.push(i);
        }
    }
    if n > pool.len() {
        return Err(Error::ExhaustedPool {
            pool: pool.len(),
            requested: n,
        });
    }
    while selected.len() < n {
        let m = selected.len();
        let mut train = DMatrix::zeros(m, pool.dim());
        let mut labels = DVector::zeros(m);
        for (r, &i) in selected.iter().enumerate() {
            train.row_mut(r).copy_from(&pool.points().row(i));
            labels[r] = target.eval(&pool.point(i));
        }
        let model = crate::kernel::fit_krr(&train, &labels, lengthscale, 1e-3 / m as f64)?;
        // feature of pool point v: coefficient-weighted kernel column
        let mut feats = kernel_matrix(&train, pool.points(), lengthscale);
        for r in 0..m {
            let c = model.coefficients()[r];
            for col in 0..feats.ncols() {
                feats[(r, col)] *= c;
            }
        }
        let feats = if m > SKETCH_THRESHOLD {
            let scale = 1.0 / (SKETCH_DIM as f64).sqrt();
            let sketch = DMatrix::from_fn(SKETCH_DIM, m, |_, _| {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                z * scale
            });
            sketch * feats
        } else {
            feats
        };
        let cols: Vec<DVector<f64>> = (0..feats.ncols())
            .map(|j| feats.column(j).into_owned())
            .collect();
        let goal = (m + ACORESET_BATCH).min(n);
        selected = coreset_select(&cols, goal, &selected, |a, b| (a - b).norm())?;
    }
    Ok(selected)
}
