//! Unnormalized log-densities on unconstrained ℝ^D.

use rand::RngCore;
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Tape, Var};

mod funnel;
mod gaussian;
pub mod german_credit;
mod logistic;

pub use funnel::Funnel;
pub use gaussian::{DiagonalGaussian, IllConditionedGaussian};
pub use german_credit::{load_german_credit, GermanCreditData};
pub use logistic::{gamma_log_density, SparseLogisticRegression};

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("{name} needs dimension >= {min}, got {got}")]
    Dimension { name: &'static str, min: usize, got: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A log-density that can be recorded on an autodiff tape.
///
/// Implementations are immutable once built and may be evaluated from many
/// threads at once.
pub trait Target: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// Records `log π(θ)` on `tape` and returns the scalar result.
    fn log_prob_on<'t>(&self, tape: &'t Tape, theta: Var<'t>) -> Var<'t>;

    /// Exact `E[θ_d²]` per component, when known analytically.
    fn true_second_moments(&self) -> Option<&[f64]> {
        None
    }

    /// An exact draw from the (normalized) target, for targets that support it.
    fn sample_exact(&self, _rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        None
    }

    fn log_prob(&self, theta: &[f64]) -> f64 {
        autodiff::evaluate(|t, x| self.log_prob_on(t, x), theta)
    }

    fn log_prob_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>), AutodiffError> {
        autodiff::gradient(|t, x| self.log_prob_on(t, x), theta)
    }
}

impl<T: Target + ?Sized> Target for &T {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_prob_on<'t>(&self, tape: &'t Tape, theta: Var<'t>) -> Var<'t> {
        (**self).log_prob_on(tape, theta)
    }
    fn true_second_moments(&self) -> Option<&[f64]> {
        (**self).true_second_moments()
    }
    fn sample_exact(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        (**self).sample_exact(rng)
    }
}

impl<T: Target + ?Sized> Target for Box<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_prob_on<'t>(&self, tape: &'t Tape, theta: Var<'t>) -> Var<'t> {
        (**self).log_prob_on(tape, theta)
    }
    fn true_second_moments(&self) -> Option<&[f64]> {
        (**self).true_second_moments()
    }
    fn sample_exact(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        (**self).sample_exact(rng)
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::Target;

    pub fn fd_grad(target: &dyn Target, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (target.log_prob(&xp) - target.log_prob(&xm)) / (2.0 * h)
            })
            .collect()
    }

    /// Componentwise relative error, floored at unit scale.
    pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
    }
}
