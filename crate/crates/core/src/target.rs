//! Ground-truth function oracles and ensembles labeled by them.

use nalgebra::DVector;

use crate::measures::MetaTestEnsemble;
use crate::{Error, Result};

/// A ground-truth function G*: ℝ^d → ℝ.
///
/// `gradient` defaults to central finite differences with step
/// 1e-4·(1+‖u‖); implementors with a closed form should override it.
pub trait Target {
    fn eval(&self, u: &DVector<f64>) -> f64;

    fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        let h = 1e-4 * (1.0 + u.norm());
        let mut g = DVector::zeros(u.len());
        let mut up = u.clone();
        let mut um = u.clone();
        for i in 0..u.len() {
            up[i] = u[i] + h;
            um[i] = u[i] - h;
            g[i] = (self.eval(&up) - self.eval(&um)) / (2.0 * h);
            up[i] = u[i];
            um[i] = u[i];
        }
        g
    }
}

/// Closure-backed target for tests and toy problems.
pub struct FnTarget<F: Fn(&DVector<f64>) -> f64>(pub F);

impl<F: Fn(&DVector<f64>) -> f64> Target for FnTarget<F> {
    fn eval(&self, u: &DVector<f64>) -> f64 {
        (self.0)(u)
    }
}

impl<T: Target + ?Sized> Target for &T {
    fn eval(&self, u: &DVector<f64>) -> f64 {
        (**self).eval(u)
    }

    fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        (**self).gradient(u)
    }
}

/// An ensemble of empirical atoms together with target values at every
/// atom point. Backs adjoint solves and error metrics.
#[derive(Debug, Clone)]
pub struct LabeledEnsemble {
    ensemble: MetaTestEnsemble,
    labels: Vec<DVector<f64>>,
}

impl LabeledEnsemble {
    /// Label every point of every (empirical) atom with the target.
    pub fn label(ensemble: MetaTestEnsemble, target: &impl Target) -> Result<Self> {
        let mut labels = Vec::with_capacity(ensemble.len());
        for (atom, _) in ensemble.iter() {
            let atom = atom.as_empirical().ok_or_else(|| {
                Error::UnsupportedConfiguration("labeling needs empirical atoms".into())
            })?;
            labels.push(DVector::from_fn(atom.len(), |i, _| {
                target.eval(&atom.point(i))
            }));
        }
        Ok(LabeledEnsemble { ensemble, labels })
    }

    /// Wrap precomputed labels; counts must match the atoms.
    pub fn from_parts(ensemble: MetaTestEnsemble, labels: Vec<DVector<f64>>) -> Result<Self> {
        if labels.len() != ensemble.len() {
            return Err(Error::DimensionMismatch {
                context: "label vector count",
                expected: ensemble.len(),
                found: labels.len(),
            });
        }
        for ((atom, _), l) in ensemble.iter().zip(&labels) {
            let atom = atom.as_empirical().ok_or_else(|| {
                Error::UnsupportedConfiguration("labeling needs empirical atoms".into())
            })?;
            if l.len() != atom.len() {
                return Err(Error::DimensionMismatch {
                    context: "labels per atom",
                    expected: atom.len(),
                    found: l.len(),
                });
            }
        }
        Ok(LabeledEnsemble { ensemble, labels })
    }

    pub fn ensemble(&self) -> &MetaTestEnsemble {
        &self.ensemble
    }

    pub fn labels(&self) -> &[DVector<f64>] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.ensemble.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ensemble.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.ensemble.dim()
    }
}
