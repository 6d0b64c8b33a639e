//! Quadratic Wasserstein machinery: closed-form Gaussian distances, optimal
//! transport maps and Kantorovich potentials, exact empirical matching, the
//! Gaussian barycenter fixed point, and a mixture stability diagnostic.

mod assignment;

pub use assignment::min_cost_assignment;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::measures::{
    sample_gaussian, EmpiricalMeasure, GaussianMeasure, MeasureAtom, MetaTestEnsemble,
};
use crate::{Error, Result};

/// Affine map u ↦ offset + linear·u.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub offset: DVector<f64>,
    pub linear: DMatrix<f64>,
}

impl AffineMap {
    pub fn new(offset: DVector<f64>, linear: DMatrix<f64>) -> Result<Self> {
        if linear.nrows() != offset.len() || linear.ncols() != offset.len() {
            return Err(Error::DimensionMismatch {
                context: "affine map shape",
                expected: offset.len(),
                found: linear.nrows().max(linear.ncols()),
            });
        }
        Ok(AffineMap { offset, linear })
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.linear * u
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

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Spectral map f(λ) applied to a symmetric matrix, eigenvalues clamped at 0.
fn psd_spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let defect = symmetry_defect(m);
    if defect > 1e-10 * (1.0 + m.norm()) {
        return Err(Error::AsymmetricMatrix { asymmetry: defect });
    }
    let eig = nalgebra::SymmetricEigen::new(symmetrize(m));
    let vals = DVector::from_fn(eig.eigenvalues.len(), |i, _| f(eig.eigenvalues[i].max(0.0)));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    Ok(symmetrize(&rebuilt))
}

/// Unique symmetric PSD square root, eigenvalues clamped at 0 before rooting.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    psd_spectral_map(m, f64::sqrt)
}

/// Inverse square root; eigenvalues floored to keep the inverse finite on
/// numerically degenerate input.
fn psd_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    psd_spectral_map(m, |l| 1.0 / l.max(1e-30).sqrt())
}

fn check_dims(a: &GaussianMeasure, b: &GaussianMeasure) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "Gaussian pair dimension",
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

/// W₂ between Gaussians:
/// W₂²(a,b) = ‖m_a − m_b‖² + tr(C_a + C_b − 2(C_a^{1/2} C_b C_a^{1/2})^{1/2}),
/// trace argument floored at 0 before rooting.
pub fn w2_gaussian(a: &GaussianMeasure, b: &GaussianMeasure) -> Result<f64> {
    check_dims(a, b)?;
    let ca = a.covariance();
    let cb = b.covariance();
    let s = psd_sqrt(&ca)?;
    let cross = psd_sqrt(&(&s * &cb * &s))?;
    let trace_arg = ca.trace() + cb.trace() - 2.0 * cross.trace();
    let mean_gap = (a.mean() - b.mean()).norm_squared();
    Ok((mean_gap + trace_arg.max(0.0)).sqrt())
}

/// Optimal transport map between Gaussians: T(u) = m_b + A(u − m_a) with
/// A = C_a^{-1/2}(C_a^{1/2} C_b C_a^{1/2})^{1/2} C_a^{-1/2}.
pub fn gaussian_ot_map(a: &GaussianMeasure, b: &GaussianMeasure) -> Result<AffineMap> {
    check_dims(a, b)?;
    let ca = a.covariance();
    let cb = b.covariance();
    let s = psd_sqrt(&ca)?;
    let sinv = psd_inv_sqrt(&ca)?;
    let mid = psd_sqrt(&(&s * &cb * &s))?;
    let linear = symmetrize(&(&sinv * mid * &sinv));
    let offset = b.mean() - &linear * a.mean();
    AffineMap::new(offset, linear)
}

/// Kantorovich potential for W₂²(a, b) at `u`, additive constant fixed to 0:
/// φ(u) = ½‖u‖² − ½⟨u, Au⟩ − ⟨u, m_b − A m_a⟩, so that ∇φ = id − T.
pub fn kantorovich_potential(a: &GaussianMeasure, b: &GaussianMeasure, u: &DVector<f64>) -> Result<f64> {
    if u.len() != a.dim() {
        return Err(Error::DimensionMismatch {
            context: "potential evaluation point",
            expected: a.dim(),
            found: u.len(),
        });
    }
    let map = gaussian_ot_map(a, b)?;
    Ok(0.5 * u.norm_squared() - 0.5 * u.dot(&(&map.linear * u)) - u.dot(&map.offset))
}

/// Exact empirical optimal transport between equal-size point clouds.
#[derive(Debug, Clone)]
pub struct EmpiricalTransport {
    /// Column (point of `b`) matched to each row (point of `a`).
    pub assignment: Vec<usize>,
    /// W₂ distance sqrt((1/N) Σ ‖a_i − b_{σ(i)}‖²).
    pub distance: f64,
}

/// Minimum-cost perfect matching on the squared-distance cost matrix.
pub fn empirical_ot(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<EmpiricalTransport> {
    if a.len() != b.len() {
        return Err(Error::UnsupportedConfiguration(format!(
            "empirical W2 needs equal particle counts, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "empirical pair dimension",
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let n = a.len();
    let pa = a.points();
    let pb = b.points();
    let mut cost = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..a.dim() {
                let diff = pa[(i, k)] - pb[(j, k)];
                acc += diff * diff;
            }
            cost[(i, j)] = acc;
        }
    }
    let (assignment, total) = min_cost_assignment(&cost);
    Ok(EmpiricalTransport {
        assignment,
        distance: (total / n as f64).sqrt(),
    })
}

/// W₂ between equal-size equal-weight empirical measures.
pub fn w2_empirical(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    Ok(empirical_ot(a, b)?.distance)
}

/// Gaussian W₂ barycenter of the ensemble.
///
/// Mean is the weighted average of atom means. Covariance solves
/// C̄ = Σ_k w_k (C̄^{1/2} C_k C̄^{1/2})^{1/2} by damped Picard iteration
/// C̄ ← C̄^{-1/2}(Σ_k w_k (C̄^{1/2} C_k C̄^{1/2})^{1/2})² C̄^{-1/2},
/// initialized at the weighted covariance average; damping drops to 0.5 only
/// if the residual oscillates.
pub fn gaussian_barycenter(
    q: &MetaTestEnsemble,
    tol: f64,
    max_iter: usize,
) -> Result<GaussianMeasure> {
    if tol <= 0.0 {
        return Err(Error::invalid("barycenter tolerance must be positive"));
    }
    let mut atoms = Vec::with_capacity(q.len());
    for (atom, _) in q.iter() {
        match atom {
            MeasureAtom::Gaussian(g) => atoms.push(g),
            MeasureAtom::Empirical(_) => {
                return Err(Error::UnsupportedConfiguration(
                    "Gaussian barycenter needs Gaussian atoms".into(),
                ))
            }
        }
    }
    let d = q.dim();
    let w = q.weights();

    let mut mean = DVector::zeros(d);
    for (g, wk) in atoms.iter().zip(w) {
        mean += g.mean() * *wk;
    }

    let mut c = DMatrix::zeros(d, d);
    for (g, wk) in atoms.iter().zip(w) {
        c += g.covariance() * *wk;
    }

    let mut damping = 1.0f64;
    let mut prev_residual = f64::INFINITY;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let s = psd_sqrt(&c)?;
        let mut mix = DMatrix::zeros(d, d);
        for (g, wk) in atoms.iter().zip(w) {
            mix += psd_sqrt(&(&s * g.covariance() * &s))? * *wk;
        }
        residual = (&c - &mix).norm();
        if residual < tol {
            return GaussianMeasure::from_covariance(mean, c);
        }
        if residual > prev_residual {
            damping = 0.5;
        }
        prev_residual = residual;
        let sinv = psd_inv_sqrt(&c)?;
        let next = symmetrize(&(&sinv * &mix * &mix * &sinv));
        c = if damping == 1.0 {
            next
        } else {
            symmetrize(&(&c * (1.0 - damping) + next * damping))
        };
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        tol,
        residual,
        last: Box::new(GaussianMeasure::from_covariance(mean, c)?),
    })
}

/// W₂ between two atoms, dispatching on kind. Gaussian-empirical pairs are
/// compared by sampling the Gaussian to the empirical size; unequal empirical
/// pairs subsample the larger side.
pub fn atom_w2<R: Rng + ?Sized>(a: &MeasureAtom, b: &MeasureAtom, rng: &mut R) -> Result<f64> {
    match (a, b) {
        (MeasureAtom::Gaussian(ga), MeasureAtom::Gaussian(gb)) => w2_gaussian(ga, gb),
        (MeasureAtom::Empirical(ea), MeasureAtom::Empirical(eb)) => {
            if ea.len() == eb.len() {
                w2_empirical(ea, eb)
            } else if ea.len() > eb.len() {
                w2_empirical(&ea.subsample(eb.len(), rng)?, eb)
            } else {
                w2_empirical(ea, &eb.subsample(ea.len(), rng)?)
            }
        }
        (MeasureAtom::Gaussian(g), MeasureAtom::Empirical(e)) => {
            w2_empirical(&sample_gaussian(g, e.len(), rng)?, e)
        }
        (MeasureAtom::Empirical(e), MeasureAtom::Gaussian(g)) => {
            w2_empirical(e, &sample_gaussian(g, e.len(), rng)?)
        }
    }
}

/// `n` draws from the mixture E_Q: pick an atom by weight, then one point
/// from it (Gaussian draw or uniform resample for empirical atoms).
pub fn sample_mixture<R: Rng + ?Sized>(
    q: &MetaTestEnsemble,
    n: usize,
    rng: &mut R,
) -> Result<EmpiricalMeasure> {
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let t: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = q.len() - 1;
        for (k, &wk) in q.weights().iter().enumerate() {
            acc += wk;
            if t < acc {
                pick = k;
                break;
            }
        }
        let point = match &q.atoms()[pick] {
            MeasureAtom::Gaussian(g) => sample_gaussian(g, 1, rng)?.point(0),
            MeasureAtom::Empirical(e) => e.draw_point(rng),
        };
        rows.push(point);
    }
    EmpiricalMeasure::from_rows(&rows)
}

/// Diagnostic for the mixture stability bound W₂(E_Q μ, E_Q' ν) ≤ W₂(Q, Q').
///
/// Returns `(lhs, rhs)`: lhs compares n-sample draws of the two mixtures,
/// rhs matches atoms by an assignment over pairwise squared W₂ costs.
/// Sampling noise means lhs ≤ rhs only up to Monte Carlo slack.
pub fn mixture_w2_stability_check<R: Rng + ?Sized>(
    q1: &MetaTestEnsemble,
    q2: &MetaTestEnsemble,
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if q1.len() != q2.len() {
        return Err(Error::UnsupportedConfiguration(format!(
            "stability diagnostic needs equal atom counts, got {} vs {}",
            q1.len(),
            q2.len()
        )));
    }
    let k = q1.len();
    let uniform = 1.0 / k as f64;
    if q1
        .weights()
        .iter()
        .chain(q2.weights())
        .any(|&w| (w - uniform).abs() > 1e-12)
    {
        return Err(Error::UnsupportedConfiguration(
            "stability diagnostic needs uniform ensemble weights".into(),
        ));
    }

    let ma = sample_mixture(q1, n, rng)?;
    let mb = sample_mixture(q2, n, rng)?;
    let lhs = w2_empirical(&ma, &mb)?;

    let mut cost = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let d = atom_w2(&q1.atoms()[i], &q2.atoms()[j], rng)?;
            cost[(i, j)] = d * d;
        }
    }
    let (_, total) = min_cost_assignment(&cost);
    let rhs = (total / k as f64).sqrt();
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use approx::assert_relative_eq;

    fn random_measure(d: usize, stream: &SeedStream) -> GaussianMeasure {
        let mut rng = stream.rng();
        let mean = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
        let mut l = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..i {
                l[(i, j)] = rng.gen_range(-0.8..0.8);
            }
            l[(i, i)] = rng.gen_range(0.4..1.8);
        }
        GaussianMeasure::new(mean, l).unwrap()
    }

    fn gauss1(mean: f64, sigma: f64) -> GaussianMeasure {
        GaussianMeasure::new(
            DVector::from_vec(vec![mean]),
            DMatrix::from_element(1, 1, sigma),
        )
        .unwrap()
    }

    #[test]
    fn psd_sqrt_closed_forms() {
        let id = DMatrix::identity(3, 3);
        assert_relative_eq!(psd_sqrt(&id).unwrap(), id, epsilon = 1e-12);
        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert_relative_eq!(psd_sqrt(&diag).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn psd_sqrt_reconstructs_random_gram_matrices() {
        let root = SeedStream::new(17);
        for k in 0..10u64 {
            let mut rng = root.rng_at(k);
            let b = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            let m = &b * b.transpose();
            let r = psd_sqrt(&m).unwrap();
            let err = (&r * &r - &m).norm() / (1.0 + m.norm());
            assert!(err < 1e-8, "reconstruction error {err:.3e}");
        }
    }

    #[test]
    fn psd_sqrt_rejects_asymmetry() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(psd_sqrt(&m), Err(Error::AsymmetricMatrix { .. })));
    }

    #[test]
    fn w2_gaussian_closed_forms() {
        let a = random_measure(3, &SeedStream::new(1));
        assert!(w2_gaussian(&a, &a).unwrap() < 1e-6);

        let b = GaussianMeasure::new(
            a.mean() + DVector::from_vec(vec![3.0, 0.0, 4.0]),
            a.cov_factor().clone(),
        )
        .unwrap();
        assert_relative_eq!(w2_gaussian(&a, &b).unwrap(), 5.0, epsilon = 1e-7);

        assert_relative_eq!(
            w2_gaussian(&gauss1(0.0, 1.0), &gauss1(0.0, 2.0)).unwrap(),
            1.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn w2_gaussian_is_symmetric_and_triangular() {
        let root = SeedStream::new(23);
        for t in 0..50u64 {
            let d = 1 + (t as usize % 5);
            let a = random_measure(d, &root.derive(3 * t));
            let b = random_measure(d, &root.derive(3 * t + 1));
            let c = random_measure(d, &root.derive(3 * t + 2));
            let ab = w2_gaussian(&a, &b).unwrap();
            let ba = w2_gaussian(&b, &a).unwrap();
            let bc = w2_gaussian(&b, &c).unwrap();
            let ac = w2_gaussian(&a, &c).unwrap();
            assert!((ab - ba).abs() < 1e-9, "symmetry gap {}", (ab - ba).abs());
            assert!(ac <= ab + bc + 1e-9, "triangle: {ac} > {ab} + {bc}");
        }
    }

    #[test]
    fn ot_map_closed_forms() {
        let a = random_measure(2, &SeedStream::new(4));
        let id_map = gaussian_ot_map(&a, &a).unwrap();
        assert_relative_eq!(id_map.linear, DMatrix::identity(2, 2), epsilon = 1e-7);
        assert!(id_map.offset.norm() < 1e-7);

        let shift = DVector::from_vec(vec![1.0, -2.0]);
        let b = GaussianMeasure::new(a.mean() + &shift, a.cov_factor().clone()).unwrap();
        let t = gaussian_ot_map(&a, &b).unwrap();
        assert_relative_eq!(t.linear, DMatrix::identity(2, 2), epsilon = 1e-7);
        let u = DVector::from_vec(vec![0.3, 0.7]);
        assert_relative_eq!(t.apply(&u), &u + &shift, epsilon = 1e-6);

        let scale = gaussian_ot_map(&gauss1(0.0, 1.0), &gauss1(0.0, 2.0)).unwrap();
        assert_relative_eq!(scale.linear[(0, 0)], 2.0, epsilon = 1e-9);
        assert_relative_eq!(
            scale.apply(&DVector::from_vec(vec![1.5]))[0],
            3.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn ot_map_pushes_a_onto_b() {
        let root = SeedStream::new(29);
        for &d in &[1usize, 2, 3] {
            let a = random_measure(d, &root.derive(d as u64));
            let b = random_measure(d, &root.derive(100 + d as u64));
            let map = gaussian_ot_map(&a, &b).unwrap();
            let mut rng = root.derive(200 + d as u64).rng();
            let samples = sample_gaussian(&a, 10_000, &mut rng).unwrap();
            let pushed: Vec<DVector<f64>> = (0..samples.len())
                .map(|i| map.apply(&samples.point(i)))
                .collect();
            let pushed = EmpiricalMeasure::from_rows(&pushed).unwrap();
            assert!(
                (pushed.mean() - b.mean()).norm() < 0.05,
                "mean gap {}",
                (pushed.mean() - b.mean()).norm()
            );
            assert!(
                (pushed.covariance() - b.covariance()).norm() < 0.1,
                "cov gap {}",
                (pushed.covariance() - b.covariance()).norm()
            );
        }
    }

    #[test]
    fn potential_closed_forms() {
        let std2 = GaussianMeasure::standard(2);
        for seed in 0..5u64 {
            let mut rng = SeedStream::new(seed).rng();
            let u = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            assert!(kantorovich_potential(&std2, &std2, &u).unwrap().abs() < 1e-9);
        }

        let v = DVector::from_vec(vec![0.5, -1.5]);
        let shifted = GaussianMeasure::new(std2.mean() + &v, std2.cov_factor().clone()).unwrap();
        let u = DVector::from_vec(vec![2.0, 1.0]);
        assert_relative_eq!(
            kantorovich_potential(&std2, &shifted, &u).unwrap(),
            -u.dot(&v),
            epsilon = 1e-9
        );
    }

    #[test]
    fn potential_gradient_is_identity_minus_map() {
        let root = SeedStream::new(31);
        let a = random_measure(3, &root.derive(0));
        let b = random_measure(3, &root.derive(1));
        let map = gaussian_ot_map(&a, &b).unwrap();
        let mut rng = root.derive(2).rng();
        let h = 1e-5;
        for _ in 0..10 {
            let u = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let mut grad = DVector::zeros(3);
            for i in 0..3 {
                let mut up = u.clone();
                let mut um = u.clone();
                up[i] += h;
                um[i] -= h;
                grad[i] = (kantorovich_potential(&a, &b, &up).unwrap()
                    - kantorovich_potential(&a, &b, &um).unwrap())
                    / (2.0 * h);
            }
            let expect = &u - map.apply(&u);
            let rel = (&grad - &expect).norm() / expect.norm().max(1.0);
            assert!(rel < 1e-5, "gradient identity rel error {rel:.3e}");
        }
    }

    #[test]
    fn empirical_w2_closed_forms() {
        let a = EmpiricalMeasure::new(DMatrix::from_row_slice(3, 2, &[
            0.0, 0.0, 1.0, 1.0, 2.0, 0.5,
        ]))
        .unwrap();
        let shuffled = EmpiricalMeasure::new(DMatrix::from_row_slice(3, 2, &[
            2.0, 0.5, 0.0, 0.0, 1.0, 1.0,
        ]))
        .unwrap();
        assert_relative_eq!(w2_empirical(&a, &shuffled).unwrap(), 0.0, epsilon = 1e-12);

        let x = EmpiricalMeasure::new(DMatrix::from_row_slice(1, 2, &[0.0, 0.0])).unwrap();
        let y = EmpiricalMeasure::new(DMatrix::from_row_slice(1, 2, &[3.0, 4.0])).unwrap();
        assert_relative_eq!(w2_empirical(&x, &y).unwrap(), 5.0, epsilon = 1e-12);

        let p = EmpiricalMeasure::new(DMatrix::from_row_slice(2, 1, &[0.0, 1.0])).unwrap();
        let q = EmpiricalMeasure::new(DMatrix::from_row_slice(2, 1, &[2.0, 3.0])).unwrap();
        assert_relative_eq!(w2_empirical(&p, &q).unwrap(), 2.0, epsilon = 1e-12);

        let bad = EmpiricalMeasure::new(DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0])).unwrap();
        assert!(matches!(
            w2_empirical(&p, &bad),
            Err(Error::UnsupportedConfiguration(_))
        ));
    }

    #[test]
    fn empirical_w2_converges_to_gaussian_w2() {
        let root = SeedStream::new(37);
        for &d in &[1usize, 2] {
            let a = random_measure(d, &root.derive(d as u64));
            let b = random_measure(d, &root.derive(50 + d as u64));
            let truth = w2_gaussian(&a, &b).unwrap();
            let mut rng = root.derive(100 + d as u64).rng();
            let sa = sample_gaussian(&a, 2000, &mut rng).unwrap();
            let sb = sample_gaussian(&b, 2000, &mut rng).unwrap();
            let emp = w2_empirical(&sa, &sb).unwrap();
            let rel = (emp - truth).abs() / truth;
            assert!(rel < 0.05, "d={d}: empirical {emp:.4} vs {truth:.4} (rel {rel:.3})");
        }
    }

    #[test]
    fn barycenter_trivial_cases() {
        let atom = random_measure(3, &SeedStream::new(41));
        let q = MetaTestEnsemble::uniform(vec![MeasureAtom::Gaussian(atom.clone())]).unwrap();
        let bary = gaussian_barycenter(&q, 1e-10, 100).unwrap();
        assert_relative_eq!(bary.mean(), atom.mean(), epsilon = 1e-9);
        assert_relative_eq!(bary.covariance(), atom.covariance(), epsilon = 1e-8);

        let m1 = DVector::from_vec(vec![1.0, 0.0]);
        let m2 = DVector::from_vec(vec![3.0, 2.0]);
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.4, 0.8]);
        let g1 = GaussianMeasure::new(m1.clone(), l.clone()).unwrap();
        let g2 = GaussianMeasure::new(m2.clone(), l.clone()).unwrap();
        let q2 = MetaTestEnsemble::uniform(vec![
            MeasureAtom::Gaussian(g1.clone()),
            MeasureAtom::Gaussian(g2),
        ])
        .unwrap();
        let bary2 = gaussian_barycenter(&q2, 1e-10, 100).unwrap();
        assert_relative_eq!(bary2.mean(), &((m1 + m2) * 0.5), epsilon = 1e-9);
        assert_relative_eq!(bary2.covariance(), g1.covariance(), epsilon = 1e-8);
    }

    #[test]
    fn barycenter_matches_scalar_fixed_point_oracle() {
        let q = MetaTestEnsemble::uniform(vec![
            MeasureAtom::Gaussian(gauss1(0.0, 1.0)),
            MeasureAtom::Gaussian(gauss1(0.0, 3.0)),
        ])
        .unwrap();
        let bary = gaussian_barycenter(&q, 1e-12, 200).unwrap();

        // scalar recurrence c ← (Σ w sqrt(c c_k))² / c, run to stationarity
        let atoms = [1.0f64, 9.0];
        let mut c = atoms.iter().sum::<f64>() / 2.0;
        for _ in 0..200 {
            let mix: f64 = atoms.iter().map(|ck| 0.5 * (c * ck).sqrt()).sum();
            let next = mix * mix / c;
            if (next - c).abs() < 1e-10 {
                c = next;
                break;
            }
            c = next;
        }
        assert_relative_eq!(c, 4.0, epsilon = 1e-9);
        assert_relative_eq!(bary.covariance()[(0, 0)], c, epsilon = 1e-8);
    }

    #[test]
    fn barycenter_satisfies_first_order_optimality() {
        let root = SeedStream::new(43);
        let atoms: Vec<MeasureAtom> = (0..4)
            .map(|k| MeasureAtom::Gaussian(random_measure(3, &root.derive(k))))
            .collect();
        let q = MetaTestEnsemble::uniform(atoms.clone()).unwrap();
        let bary = gaussian_barycenter(&q, 1e-11, 500).unwrap();

        let objective = |c: &DMatrix<f64>| -> f64 {
            let g = GaussianMeasure::from_covariance(bary.mean().clone(), c.clone()).unwrap();
            q.iter()
                .map(|(atom, w)| {
                    let d = w2_gaussian(&g, atom.as_gaussian().unwrap()).unwrap();
                    w * d * d
                })
                .sum()
        };
        let base = objective(&bary.covariance());
        let mut rng = root.derive(99).rng();
        for _ in 0..20 {
            let raw = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let sym = symmetrize(&raw);
            let pert = &sym * (1e-3 / sym.norm());
            let perturbed = objective(&(bary.covariance() + pert));
            assert!(
                perturbed >= base - 1e-8,
                "perturbation decreased objective: {base} -> {perturbed}"
            );
        }
    }

    #[test]
    fn barycenter_rejects_empirical_atoms_and_reports_nonconvergence() {
        let e = EmpiricalMeasure::new(DMatrix::zeros(2, 1).add_scalar(1.0)).unwrap();
        let q = MetaTestEnsemble::uniform(vec![MeasureAtom::Empirical(e)]).unwrap();
        assert!(matches!(
            gaussian_barycenter(&q, 1e-8, 10),
            Err(Error::UnsupportedConfiguration(_))
        ));

        let q2 = MetaTestEnsemble::uniform(vec![
            MeasureAtom::Gaussian(gauss1(0.0, 1.0)),
            MeasureAtom::Gaussian(gauss1(0.0, 3.0)),
        ])
        .unwrap();
        match gaussian_barycenter(&q2, 1e-13, 1) {
            Err(Error::NoConvergence { last, .. }) => {
                assert_eq!(last.dim(), 1);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn stability_check_identical_and_permuted_ensembles() {
        let root = SeedStream::new(47);
        let a = random_measure(2, &root.derive(0));
        let b = random_measure(2, &root.derive(1));
        let q1 = MetaTestEnsemble::uniform(vec![
            MeasureAtom::Gaussian(a.clone()),
            MeasureAtom::Gaussian(b.clone()),
        ])
        .unwrap();
        let q_perm = MetaTestEnsemble::uniform(vec![
            MeasureAtom::Gaussian(b),
            MeasureAtom::Gaussian(a),
        ])
        .unwrap();
        let mut rng = root.derive(2).rng();
        let (lhs, rhs) = mixture_w2_stability_check(&q1, &q1, 400, &mut rng).unwrap();
        assert_relative_eq!(rhs, 0.0, epsilon = 1e-7);
        assert!(lhs < 0.5, "same-mixture lhs should be small, got {lhs}");
        let (_, rhs_perm) = mixture_w2_stability_check(&q1, &q_perm, 50, &mut rng).unwrap();
        assert_relative_eq!(rhs_perm, 0.0, epsilon = 1e-7);
    }

    #[test]
    fn stability_check_single_atom_reduces_to_gaussian_w2() {
        let root = SeedStream::new(53);
        let a = random_measure(2, &root.derive(0));
        let b = random_measure(2, &root.derive(1));
        let truth = w2_gaussian(&a, &b).unwrap();
        let q1 = MetaTestEnsemble::uniform(vec![MeasureAtom::Gaussian(a)]).unwrap();
        let q2 = MetaTestEnsemble::uniform(vec![MeasureAtom::Gaussian(b)]).unwrap();
        let mut rng = root.derive(2).rng();
        let (lhs, rhs) = mixture_w2_stability_check(&q1, &q2, 2000, &mut rng).unwrap();
        assert_relative_eq!(rhs, truth, epsilon = 1e-9);
        assert!((lhs - truth).abs() / truth < 0.05, "lhs {lhs} vs {truth}");
        // the bound itself, with sampling slack
        assert!(lhs <= rhs + 0.15 * truth.max(1.0));
    }
}
