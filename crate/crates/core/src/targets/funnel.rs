use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::{Target, TargetError, HALF_LN_2PI};
use crate::autodiff::{Tape, Var};

/// Neal's funnel: `θ₀ ~ N(0, 1)`, `θ_d | θ₀ ~ N(0, exp(2θ₀))` for `d ≥ 1`.
///
/// The density is kept fully normalized; the `−(D−1)θ₀` term depends on the
/// position and cannot be dropped.
#[derive(Clone, Debug)]
pub struct Funnel {
    dim: usize,
    moments: Vec<f64>,
}

impl Funnel {
    pub fn new(dim: usize) -> Result<Self, TargetError> {
        if dim < 2 {
            return Err(TargetError::Dimension { name: "funnel", min: 2, got: dim });
        }
        let mut moments = vec![std::f64::consts::E.powi(2); dim];
        moments[0] = 1.0;
        Ok(Funnel { dim, moments })
    }
}

impl Target for Funnel {
    fn name(&self) -> &str {
        "funnel"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn log_prob_on<'t>(&self, _tape: &'t Tape, theta: Var<'t>) -> Var<'t> {
        let rest = (self.dim - 1) as f64;
        let neck = theta.slice(0, 1);
        let spread = theta.slice(1, self.dim - 1);
        let inv_var = neck.scale(-2.0).exp();
        let quad = spread.square().sum() * inv_var;
        ((neck.square() + quad).scale(-0.5) - neck.scale(rest)).offset(-(self.dim as f64) * HALF_LN_2PI)
    }

    fn true_second_moments(&self) -> Option<&[f64]> {
        Some(&self.moments)
    }

    fn sample_exact(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        let neck: f64 = StandardNormal.sample(rng);
        let scale = neck.exp();
        let mut out = Vec::with_capacity(self.dim);
        out.push(neck);
        out.extend((1..self.dim).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)));
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::testing::{fd_grad, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn density_at_origin() {
        let f = Funnel::new(100).unwrap();
        assert!((f.log_prob(&[0.0; 100]) - (-50.0 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-10);
        assert!((f.log_prob(&[0.0; 100]) - (-91.893_853_320_467_27)).abs() < 1e-9);
    }

    #[test]
    fn analytic_moments() {
        let f = Funnel::new(4).unwrap();
        let m = f.true_second_moments().unwrap();
        assert_eq!(m[0], 1.0);
        assert!((m[1] - 7.389_056_098_930_65).abs() < 1e-12);
    }

    #[test]
    fn needs_two_dimensions() {
        assert!(Funnel::new(1).is_err());
    }

    #[test]
    fn neck_gradient_matches_closed_form() {
        let d = 7;
        let f = Funnel::new(d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (_, g) = f.log_prob_and_grad(&x).unwrap();
            let sq: f64 = x[1..].iter().map(|v| v * v).sum();
            let want = -x[0] - (d - 1) as f64 + (-2.0 * x[0]).exp() * sq;
            assert!((g[0] - want).abs() <= 1e-10 * want.abs().max(1.0));
            for i in 1..d {
                let want = -x[i] * (-2.0 * x[0]).exp();
                assert!((g[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = Funnel::new(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (_, g) = f.log_prob_and_grad(&x).unwrap();
            assert!(max_rel_err(&g, &fd_grad(&f, &x, 1e-5)) < 1e-5);
        }
    }
}
