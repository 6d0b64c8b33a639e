//! Probability measures on R^d: Gaussian measures stored through a Cholesky
//! factor, equal-weight empirical measures, and weighted ensembles of either.
//!
//! Gaussian covariance is never stored directly; keeping only the
//! lower-triangular factor `L` with floored diagonal guarantees positive
//! definiteness throughout optimization and halves the parameter count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::{Error, Result};

/// Smallest admissible diagonal entry of a Gaussian Cholesky factor.
pub const DIAG_FLOOR: f64 = 1e-7;

/// Gaussian measure N(m, C) with C = L·Lᵀ, L lower triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    cov_factor: DMatrix<f64>,
}

impl GaussianMeasure {
    /// Builds a measure from a mean and a lower-triangular factor.
    ///
    /// The strict upper triangle must be zero and every diagonal entry must
    /// be at least [`DIAG_FLOOR`].
    pub fn new(mean: DVector<f64>, cov_factor: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov_factor.nrows() != d || cov_factor.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "Gaussian cov_factor shape",
                expected: d,
                found: cov_factor.nrows().max(cov_factor.ncols()),
            });
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if cov_factor[(i, j)] != 0.0 {
                    return Err(Error::invalid(format!(
                        "cov_factor must be lower triangular; entry ({i},{j}) = {}",
                        cov_factor[(i, j)]
                    )));
                }
            }
            if cov_factor[(i, i)] < DIAG_FLOOR || cov_factor[(i, i)].is_nan() {
                return Err(Error::invalid(format!(
                    "cov_factor diagonal entry {i} = {} below floor {DIAG_FLOOR}",
                    cov_factor[(i, i)]
                )));
            }
        }
        if mean.iter().any(|x| !x.is_finite())
            || cov_factor.iter().any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("Gaussian parameters".into()));
        }
        Ok(GaussianMeasure { mean, cov_factor })
    }

    /// Builds a measure from a full covariance matrix via its Cholesky
    /// factorization, flooring the factor diagonal at [`DIAG_FLOOR`].
    pub fn from_covariance(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "Gaussian covariance shape",
                expected: d,
                found: covariance.nrows().max(covariance.ncols()),
            });
        }
        let sym = symmetry_defect(&covariance);
        if sym > 1e-10 * (1.0 + covariance.norm()) {
            return Err(Error::AsymmetricMatrix { asymmetry: sym });
        }
        let chol = nalgebra::Cholesky::new(covariance.clone()).ok_or_else(|| {
            Error::invalid("covariance is not positive definite".to_string())
        })?;
        let mut l = chol.l();
        for i in 0..d {
            if l[(i, i)] < DIAG_FLOOR {
                l[(i, i)] = DIAG_FLOOR;
            }
        }
        GaussianMeasure::new(mean, l)
    }

    /// Standard normal N(0, I_d).
    pub fn standard(d: usize) -> Self {
        GaussianMeasure {
            mean: DVector::zeros(d),
            cov_factor: DMatrix::identity(d, d),
        }
    }

    /// Isotropic N(mean, sigma² I).
    pub fn isotropic(mean: DVector<f64>, sigma: f64) -> Result<Self> {
        let d = mean.len();
        GaussianMeasure::new(mean, DMatrix::identity(d, d) * sigma)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov_factor(&self) -> &DMatrix<f64> {
        &self.cov_factor
    }

    /// Reconstructed covariance C = L·Lᵀ.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.cov_factor * self.cov_factor.transpose()
    }

    /// E‖u‖² = ‖m‖² + tr(C); tr(LLᵀ) is the squared Frobenius norm of L.
    pub fn second_moment(&self) -> f64 {
        self.mean.norm_squared() + self.cov_factor.iter().map(|x| x * x).sum::<f64>()
    }

    /// Log density at `u`.
    pub fn log_density(&self, u: &DVector<f64>) -> f64 {
        let d = self.dim() as f64;
        let r = self.whiten(u);
        let log_det_l: f64 = (0..self.dim()).map(|i| self.cov_factor[(i, i)].ln()).sum();
        -0.5 * r.norm_squared() - log_det_l - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
    }

    /// Solves L w = u − m (so that ‖w‖² = (u−m)ᵀ C⁻¹ (u−m)).
    fn whiten(&self, u: &DVector<f64>) -> DVector<f64> {
        let resid = u - &self.mean;
        self.cov_factor
            .solve_lower_triangular(&resid)
            .expect("floored diagonal guarantees invertibility")
    }

    /// C⁻¹(u − m) via two triangular solves.
    pub fn score_mean(&self, u: &DVector<f64>) -> DVector<f64> {
        let w = self.whiten(u);
        self.cov_factor
            .transpose()
            .solve_upper_triangular(&w)
            .expect("floored diagonal guarantees invertibility")
    }

    /// Gradient of log density in the free lower-triangular entries of L:
    /// lower(r rᵀ L − L^{-T}) with r = C⁻¹(u−m). The lower-triangular part of
    /// L^{-T} is diag(1/L_ii).
    pub fn score_cholesky(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let r = self.score_mean(u);
        let v = self.cov_factor.transpose() * &r; // v = Lᵀ r, so r rᵀ L = r vᵀ
        let mut g = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                g[(i, j)] = r[i] * v[j];
            }
            g[(i, i)] -= 1.0 / self.cov_factor[(i, i)];
        }
        g
    }
}

fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Equal-weight empirical measure; one row of `points` per atom.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: DMatrix<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::invalid("empirical measure needs at least one point"));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("empirical measure points".into()));
        }
        Ok(EmpiricalMeasure { points })
    }

    pub fn from_rows(rows: &[DVector<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("empirical measure needs at least one point"));
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                context: "empirical measure point dimension",
                expected: d,
                found: bad.len(),
            });
        }
        let mut points = DMatrix::zeros(rows.len(), d);
        for (i, r) in rows.iter().enumerate() {
            points.row_mut(i).copy_from(&r.transpose());
        }
        EmpiricalMeasure::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // N ≥ 1 by construction
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Point matrix, one row per point.
    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        self.points.row(i).transpose()
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.len() as f64;
        let mut m = DVector::zeros(self.dim());
        for i in 0..self.len() {
            m += self.points.row(i).transpose();
        }
        m / n
    }

    /// Population covariance (1/N normalization).
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.len() as f64;
        let m = self.mean();
        let mut c = DMatrix::zeros(self.dim(), self.dim());
        for i in 0..self.len() {
            let r = self.points.row(i).transpose() - &m;
            c.syger(1.0 / n, &r, &r, 1.0);
        }
        // syger fills the lower triangle; mirror it
        for i in 0..self.dim() {
            for j in (i + 1)..self.dim() {
                c[(i, j)] = c[(j, i)];
            }
        }
        c
    }

    /// (1/N) Σ ‖u_n‖².
    pub fn second_moment(&self) -> f64 {
        self.points.iter().map(|x| x * x).sum::<f64>() / self.len() as f64
    }

    /// One point drawn uniformly at random.
    pub fn draw_point<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.point(rng.gen_range(0..self.len()))
    }

    /// Uniform subsample of `n` distinct points (order of first appearance).
    pub fn subsample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<EmpiricalMeasure> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(format!(
                "subsample size {n} outside 1..={}",
                self.len()
            )));
        }
        // partial Fisher-Yates over an index vector
        let mut idx: Vec<usize> = (0..self.len()).collect();
        for i in 0..n {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        let mut sel = idx[..n].to_vec();
        sel.sort_unstable();
        let mut pts = DMatrix::zeros(n, self.dim());
        for (row, &i) in sel.iter().enumerate() {
            pts.row_mut(row).copy_from(&self.points.row(i));
        }
        EmpiricalMeasure::new(pts)
    }
}

/// Either kind of atom an ensemble may hold.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasureAtom {
    Gaussian(GaussianMeasure),
    Empirical(EmpiricalMeasure),
}

impl MeasureAtom {
    pub fn dim(&self) -> usize {
        match self {
            MeasureAtom::Gaussian(g) => g.dim(),
            MeasureAtom::Empirical(e) => e.dim(),
        }
    }

    pub fn second_moment(&self) -> f64 {
        match self {
            MeasureAtom::Gaussian(g) => g.second_moment(),
            MeasureAtom::Empirical(e) => e.second_moment(),
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianMeasure> {
        match self {
            MeasureAtom::Gaussian(g) => Some(g),
            MeasureAtom::Empirical(_) => None,
        }
    }

    pub fn as_empirical(&self) -> Option<&EmpiricalMeasure> {
        match self {
            MeasureAtom::Empirical(e) => Some(e),
            MeasureAtom::Gaussian(_) => None,
        }
    }

    /// `n` draws from the atom (i.i.d. for Gaussian atoms, with replacement
    /// for empirical atoms).
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<EmpiricalMeasure> {
        match self {
            MeasureAtom::Gaussian(g) => sample_gaussian(g, n, rng),
            MeasureAtom::Empirical(e) => {
                if n == 0 {
                    return Err(Error::invalid("sample count must be ≥ 1"));
                }
                let mut pts = DMatrix::zeros(n, e.dim());
                for i in 0..n {
                    let j = rng.gen_range(0..e.len());
                    pts.row_mut(i).copy_from(&e.points().row(j));
                }
                EmpiricalMeasure::new(pts)
            }
        }
    }
}

/// Weighted family of deployment distributions Q = Σ w_k δ_{ν'_k}.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTestEnsemble {
    atoms: Vec<MeasureAtom>,
    weights: Vec<f64>,
}

impl MetaTestEnsemble {
    pub fn new(atoms: Vec<MeasureAtom>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::invalid("ensemble needs at least one atom"));
        }
        if weights.len() != atoms.len() {
            return Err(Error::DimensionMismatch {
                context: "ensemble weight count",
                expected: atoms.len(),
                found: weights.len(),
            });
        }
        let d = atoms[0].dim();
        if let Some(bad) = atoms.iter().find(|a| a.dim() != d) {
            return Err(Error::DimensionMismatch {
                context: "ensemble atom dimension",
                expected: d,
                found: bad.dim(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("ensemble weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "ensemble weights sum to {total}, expected 1"
            )));
        }
        Ok(MetaTestEnsemble { atoms, weights })
    }

    pub fn uniform(atoms: Vec<MeasureAtom>) -> Result<Self> {
        let k = atoms.len();
        if k == 0 {
            return Err(Error::invalid("ensemble needs at least one atom"));
        }
        let w = vec![1.0 / k as f64; k];
        MetaTestEnsemble::new(atoms, w)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        false // K ≥ 1 by construction
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }

    pub fn atoms(&self) -> &[MeasureAtom] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MeasureAtom, f64)> {
        self.atoms.iter().zip(self.weights.iter().copied())
    }
}

/// `n` i.i.d. draws u = m + L z with z ~ N(0, I).
///
/// Draw order is fixed: points in order, coordinates within a point in order,
/// so callers relying on common random numbers can reproduce the z batch.
pub fn sample_gaussian<R: Rng + ?Sized>(
    g: &GaussianMeasure,
    n: usize,
    rng: &mut R,
) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return Err(Error::invalid("sample count must be ≥ 1"));
    }
    let d = g.dim();
    let mut z = DVector::zeros(d);
    let mut pts = DMatrix::zeros(n, d);
    for i in 0..n {
        for k in 0..d {
            z[k] = StandardNormal.sample(rng);
        }
        let u = g.mean() + g.cov_factor() * &z;
        pts.row_mut(i).copy_from(&u.transpose());
    }
    EmpiricalMeasure::new(pts)
}

/// `n`×`d` matrix of standard-normal draws, row by row (same order as
/// [`sample_gaussian`]), for callers that pin a z batch and push it through
/// several parameter values.
pub fn standard_normal_matrix<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n, d);
    for i in 0..n {
        for k in 0..d {
            z[(i, k)] = StandardNormal.sample(rng);
        }
    }
    z
}

/// Maps standard-normal draws `z` (one row per point) through u = m + L z.
pub fn gaussian_push(g: &GaussianMeasure, z: &DMatrix<f64>) -> Result<EmpiricalMeasure> {
    if z.ncols() != g.dim() {
        return Err(Error::DimensionMismatch {
            context: "standard-normal draw dimension",
            expected: g.dim(),
            found: z.ncols(),
        });
    }
    // rows are points: u_i = m + L z_i  ⇔  U = Z Lᵀ + 1 mᵀ
    let mut pts = z * g.cov_factor().transpose();
    for i in 0..pts.nrows() {
        for k in 0..g.dim() {
            pts[(i, k)] += g.mean()[k];
        }
    }
    EmpiricalMeasure::new(pts)
}

/// One draw from Wishart(I_d, dof) by the Bartlett decomposition: A lower
/// triangular with A_ii = sqrt(χ²(dof − i)) and standard-normal subdiagonal;
/// returns A·Aᵀ.
pub fn sample_wishart<R: Rng + ?Sized>(d: usize, dof: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if dof < d {
        return Err(Error::InvalidDegreesOfFreedom { dim: d, dof });
    }
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
        let chi = ChiSquared::new((dof - i) as f64)
            .map_err(|e| Error::invalid(format!("chi-squared parameter: {e}")))?;
        let draw: f64 = chi.sample(rng);
        a[(i, i)] = draw.sqrt();
    }
    Ok(&a * a.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use approx::assert_relative_eq;

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn sample_mean_obeys_law_of_large_numbers() {
        let g = GaussianMeasure::standard(2);
        let mut rng = SeedStream::new(42).rng();
        let s = sample_gaussian(&g, 100_000, &mut rng).unwrap();
        let m = s.mean();
        assert!(m[0].abs() < 0.02 && m[1].abs() < 0.02, "mean {m:?}");
    }

    #[test]
    fn floor_degenerate_measure_is_near_delta() {
        let mean = vec2(3.0, -1.0);
        let g = GaussianMeasure::new(mean.clone(), DMatrix::identity(2, 2) * DIAG_FLOOR).unwrap();
        let mut rng = SeedStream::new(1).rng();
        let s = sample_gaussian(&g, 3, &mut rng).unwrap();
        for i in 0..3 {
            assert!((s.point(i) - &mean).norm() < 1e-3);
        }
    }

    #[test]
    fn sampling_is_deterministic_for_fixed_stream() {
        let g = GaussianMeasure::new(
            vec2(0.5, -0.25),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 0.7]),
        )
        .unwrap();
        let s1 = sample_gaussian(&g, 5, &mut SeedStream::new(9).rng()).unwrap();
        let s2 = sample_gaussian(&g, 5, &mut SeedStream::new(9).rng()).unwrap();
        assert_eq!(s1.points(), s2.points());
    }

    #[test]
    fn second_moment_closed_forms() {
        assert_relative_eq!(GaussianMeasure::standard(3).second_moment(), 3.0);
        let g = GaussianMeasure::new(vec2(1.0, 2.0), DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(g.second_moment(), 7.0);
        let e =
            EmpiricalMeasure::new(DMatrix::from_row_slice(2, 1, &[0.0, 2.0])).unwrap();
        assert_relative_eq!(e.second_moment(), 2.0);
    }

    #[test]
    fn score_mean_closed_forms() {
        let g = GaussianMeasure::new(
            vec2(1.0, -2.0),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.5, 1.5]),
        )
        .unwrap();
        assert!(g.score_mean(g.mean()).norm() < 1e-15);

        let id = GaussianMeasure::standard(2);
        let u = vec2(1.0, 2.0);
        assert_relative_eq!(id.score_mean(&u), u, epsilon = 1e-14);
    }

    #[test]
    fn score_cholesky_closed_forms() {
        let g = GaussianMeasure::standard(2);
        let s = g.score_cholesky(&DVector::zeros(2));
        assert_relative_eq!(s, -DMatrix::identity(2, 2), epsilon = 1e-14);

        // d=1: x²/σ³ − 1/σ, zero at σ=1, x=1
        let g1 = GaussianMeasure::new(
            DVector::from_vec(vec![0.0]),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let s1 = g1.score_cholesky(&DVector::from_vec(vec![1.0]));
        assert_relative_eq!(s1[(0, 0)], 0.0, epsilon = 1e-14);
        let g2 = GaussianMeasure::new(
            DVector::from_vec(vec![0.0]),
            DMatrix::from_element(1, 1, 2.0),
        )
        .unwrap();
        let s2 = g2.score_cholesky(&DVector::from_vec(vec![3.0]));
        assert_relative_eq!(s2[(0, 0)], 9.0 / 8.0 - 0.5, epsilon = 1e-12);
    }

    fn random_measure(d: usize, stream: &SeedStream) -> GaussianMeasure {
        let mut rng = stream.rng();
        let mean = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
        let mut l = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..i {
                l[(i, j)] = rng.gen_range(-1.0..1.0);
            }
            l[(i, i)] = rng.gen_range(0.3..2.0);
        }
        GaussianMeasure::new(mean, l).unwrap()
    }

    /// Central finite differences of the explicit log density in each free
    /// parameter; oracle for both score functions.
    fn fd_scores(g: &GaussianMeasure, u: &DVector<f64>, h: f64) -> (DVector<f64>, DMatrix<f64>) {
        let d = g.dim();
        let logp = |mean: &DVector<f64>, l: &DMatrix<f64>| -> f64 {
            GaussianMeasure::new(mean.clone(), l.clone())
                .unwrap()
                .log_density(u)
        };
        let mut gm = DVector::zeros(d);
        for i in 0..d {
            let mut mp = g.mean().clone();
            let mut mm = g.mean().clone();
            mp[i] += h;
            mm[i] -= h;
            gm[i] = (logp(&mp, g.cov_factor()) - logp(&mm, g.cov_factor())) / (2.0 * h);
        }
        let mut gl = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                let mut lp = g.cov_factor().clone();
                let mut lm = g.cov_factor().clone();
                lp[(i, j)] += h;
                lm[(i, j)] -= h;
                gl[(i, j)] = (logp(g.mean(), &lp) - logp(g.mean(), &lm)) / (2.0 * h);
            }
        }
        (gm, gl)
    }

    #[test]
    fn scores_match_finite_differences() {
        let root = SeedStream::new(2024);
        for (di, &d) in [1usize, 2, 5].iter().enumerate() {
            for pair in 0..20u64 {
                let stream = root.derive(di as u64 * 100 + pair);
                let g = random_measure(d, &stream);
                let mut rng = stream.derive(999).rng();
                let u = DVector::from_fn(d, |_, _| rng.gen_range(-3.0..3.0));
                let (fd_m, fd_l) = fd_scores(&g, &u, 1e-5);
                let sm = g.score_mean(&u);
                let sl = g.score_cholesky(&u);
                let rel_m = (&sm - &fd_m).norm() / fd_m.norm().max(1.0);
                let rel_l = (&sl - &fd_l).norm() / fd_l.norm().max(1.0);
                assert!(rel_m < 1e-4, "d={d} pair={pair} rel_m={rel_m:.2e}");
                assert!(rel_l < 1e-4, "d={d} pair={pair} rel_l={rel_l:.2e}");
            }
        }
    }

    #[test]
    fn wishart_mean_matches_dof_scaling() {
        let mut rng = SeedStream::new(7).rng();
        let mut acc = DMatrix::zeros(2, 2);
        let n = 10_000;
        for _ in 0..n {
            acc += sample_wishart(2, 3, &mut rng).unwrap();
        }
        acc /= n as f64;
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 3.0 } else { 0.0 };
                assert!(
                    (acc[(i, j)] - expect).abs() < 0.15,
                    "entry ({i},{j}) = {}",
                    acc[(i, j)]
                );
            }
        }
    }

    #[test]
    fn wishart_draws_are_symmetric_psd_and_deterministic() {
        let w1 = sample_wishart(4, 6, &mut SeedStream::new(3).rng()).unwrap();
        let w2 = sample_wishart(4, 6, &mut SeedStream::new(3).rng()).unwrap();
        assert_eq!(w1, w2);
        assert!(symmetry_defect(&w1) < 1e-12);
        let eig = nalgebra::SymmetricEigen::new(w1.clone());
        assert!(eig.eigenvalues.min() >= -1e-12);
        assert!(matches!(
            sample_wishart(3, 2, &mut SeedStream::new(0).rng()),
            Err(Error::InvalidDegreesOfFreedom { dim: 3, dof: 2 })
        ));
    }

    #[test]
    fn covariance_reconstruction_stays_positive() {
        let root = SeedStream::new(5);
        for k in 0..30u64 {
            let g = random_measure(3, &root.derive(k));
            let c = g.covariance();
            assert!(symmetry_defect(&c) < 1e-12);
            let eig = nalgebra::SymmetricEigen::new(c);
            assert!(eig.eigenvalues.min() >= DIAG_FLOOR * DIAG_FLOOR - 1e-14);
        }
        // floor-boundary diagonal factor
        let g = GaussianMeasure::new(vec2(0.0, 0.0), DMatrix::identity(2, 2) * DIAG_FLOOR).unwrap();
        let eig = nalgebra::SymmetricEigen::new(g.covariance());
        assert!(eig.eigenvalues.min() >= DIAG_FLOOR * DIAG_FLOOR - 1e-14);
    }

    #[test]
    fn sample_covariance_approximates_truth() {
        let root = SeedStream::new(31);
        for &d in &[2usize, 5] {
            let g = random_measure(d, &root.derive(d as u64));
            let mut rng = root.derive(100 + d as u64).rng();
            let s = sample_gaussian(&g, 100_000, &mut rng).unwrap();
            let diff = s.covariance() - g.covariance();
            let op = nalgebra::SymmetricEigen::new(diff)
                .eigenvalues
                .iter()
                .fold(0.0f64, |m, &x| m.max(x.abs()));
            let scale = nalgebra::SymmetricEigen::new(g.covariance())
                .eigenvalues
                .iter()
                .fold(0.0f64, |m, &x| m.max(x.abs()));
            assert!(op < 5e-2 * scale, "d={d}: op error {op:.3e} vs scale {scale:.3e}");
        }
    }

    #[test]
    fn constructor_rejects_bad_factors() {
        assert!(GaussianMeasure::new(
            vec2(0.0, 0.0),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]) // upper entry
        )
        .is_err());
        assert!(GaussianMeasure::new(
            vec2(0.0, 0.0),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]) // zero diagonal
        )
        .is_err());
        assert!(GaussianMeasure::new(DVector::zeros(3), DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn ensemble_validation() {
        let a = MeasureAtom::Gaussian(GaussianMeasure::standard(2));
        let b = MeasureAtom::Gaussian(GaussianMeasure::standard(3));
        assert!(MetaTestEnsemble::new(vec![a.clone(), b], vec![0.5, 0.5]).is_err());
        assert!(MetaTestEnsemble::new(vec![a.clone()], vec![0.9]).is_err());
        assert!(MetaTestEnsemble::new(vec![a.clone()], vec![-1.0]).is_err());
        let ok = MetaTestEnsemble::uniform(vec![a]).unwrap();
        assert_eq!(ok.len(), 1);
        assert_relative_eq!(ok.weights()[0], 1.0);
    }

    #[test]
    fn gaussian_push_matches_direct_sampling_layout() {
        let g = GaussianMeasure::new(
            vec2(1.0, -1.0),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 0.5]),
        )
        .unwrap();
        let z = DMatrix::from_row_slice(2, 2, &[0.3, -0.7, 1.1, 0.2]);
        let pushed = gaussian_push(&g, &z).unwrap();
        for i in 0..2 {
            let zi = z.row(i).transpose();
            let expect = g.mean() + g.cov_factor() * zi;
            assert_relative_eq!(pushed.point(i), expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn subsample_is_distinct_and_in_range() {
        let e = EmpiricalMeasure::new(DMatrix::from_fn(10, 1, |i, _| i as f64)).unwrap();
        let mut rng = SeedStream::new(8).rng();
        let s = e.subsample(4, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        let mut seen = std::collections::HashSet::new();
        for i in 0..4 {
            let v = s.point(i)[0] as i64;
            assert!((0..10).contains(&v));
            assert!(seen.insert(v));
        }
        assert!(e.subsample(11, &mut rng).is_err());
    }
}
