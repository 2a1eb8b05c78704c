use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::{Target, TargetError, HALF_LN_2PI};
use crate::autodiff::{ConstMatrix, Tape, Var};

/// Eigenvalues below this are clamped so Σ stays numerically invertible.
pub const MIN_EIGENVALUE: f64 = 1e-6;

/// Zero-mean Gaussian with a quenched random covariance `Q diag(e) Qᵀ`, where
/// `e ~ Gamma(0.5, 1)` and `Q` is a Haar-random orthogonal matrix, both drawn
/// once from the seed.
#[derive(Clone, Debug)]
pub struct IllConditionedGaussian {
    dim: usize,
    seed: u64,
    eigenvalues: Vec<f64>,
    precision: ConstMatrix,
    /// `Q diag(√e)`, so `chol · ξ` with `ξ ~ N(0, I)` is an exact draw.
    sqrt_cov: ConstMatrix,
    variances: Vec<f64>,
}

fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Fix column signs so Q is Haar distributed rather than biased by the QR
    // sign convention.
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl IllConditionedGaussian {
    pub fn new(seed: u64, dim: usize) -> Result<Self, TargetError> {
        if dim < 1 {
            return Err(TargetError::Dimension { name: "ill-conditioned gaussian", min: 1, got: dim });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = Gamma::new(0.5, 1.0).expect("valid gamma parameters");
        let eigenvalues: Vec<f64> = (0..dim).map(|_| f64::max(gamma.sample(&mut rng), MIN_EIGENVALUE)).collect();
        let q = random_orthogonal(dim, &mut rng);

        let mut precision = vec![0.0; dim * dim];
        let mut sqrt_cov = vec![0.0; dim * dim];
        let mut variances = vec![0.0; dim];
        for i in 0..dim {
            for j in 0..dim {
                let mut p = 0.0;
                for (k, e) in eigenvalues.iter().enumerate() {
                    p += q[(i, k)] * q[(j, k)] / e;
                }
                precision[i * dim + j] = p;
                sqrt_cov[i * dim + j] = q[(i, j)] * eigenvalues[j].sqrt();
            }
            variances[i] = eigenvalues.iter().enumerate().map(|(k, e)| q[(i, k)] * q[(i, k)] * e).sum();
        }
        // Symmetrize away rounding so log_prob(θ) = log_prob(-θ) holds bitwise.
        for i in 0..dim {
            for j in 0..i {
                let s = 0.5 * (precision[i * dim + j] + precision[j * dim + i]);
                precision[i * dim + j] = s;
                precision[j * dim + i] = s;
            }
        }
        Ok(IllConditionedGaussian {
            dim,
            seed,
            eigenvalues,
            precision: ConstMatrix::new(precision, dim, dim),
            sqrt_cov: ConstMatrix::new(sqrt_cov, dim, dim),
            variances,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn precision(&self) -> &ConstMatrix {
        &self.precision
    }

    /// Largest over smallest eigenvalue.
    pub fn condition_number(&self) -> f64 {
        let max = self.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    }
}

impl Target for IllConditionedGaussian {
    fn name(&self) -> &str {
        "ill-conditioned-gaussian"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn log_prob_on<'t>(&self, _tape: &'t Tape, theta: Var<'t>) -> Var<'t> {
        theta.left_mul(&self.precision).dot(theta).scale(-0.5)
    }

    fn true_second_moments(&self) -> Option<&[f64]> {
        Some(&self.variances)
    }

    fn sample_exact(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        let xi: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(rng)).collect();
        Some(self.sqrt_cov.mul_vec(&xi))
    }
}

/// Normalized Gaussian `N(0, diag(scales²))`.
#[derive(Clone, Debug)]
pub struct DiagonalGaussian {
    scales: Vec<f64>,
    variances: Vec<f64>,
    log_norm: f64,
}

impl DiagonalGaussian {
    pub fn new(scales: Vec<f64>) -> Self {
        assert!(scales.iter().all(|s| *s > 0.0 && s.is_finite()), "scales must be positive");
        let variances = scales.iter().map(|s| s * s).collect();
        let log_norm = -scales.iter().map(|s| s.ln() + HALF_LN_2PI).sum::<f64>();
        DiagonalGaussian { scales, variances, log_norm }
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(vec![1.0; dim])
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
}

impl Target for DiagonalGaussian {
    fn name(&self) -> &str {
        "diagonal-gaussian"
    }

    fn dim(&self) -> usize {
        self.scales.len()
    }

    fn log_prob_on<'t>(&self, tape: &'t Tape, theta: Var<'t>) -> Var<'t> {
        let inv_var = tape.constant(self.variances.iter().map(|v| -0.5 / v).collect());
        theta.square().dot(inv_var).offset(self.log_norm)
    }

    fn true_second_moments(&self) -> Option<&[f64]> {
        Some(&self.variances)
    }

    fn sample_exact(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        Some(self.scales.iter().map(|s| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::testing::{fd_grad, max_rel_err};
    use rand::Rng;

    #[test]
    fn log_prob_at_mean_is_zero() {
        let g = IllConditionedGaussian::new(1, 10).unwrap();
        assert_eq!(g.log_prob(&[0.0; 10]), 0.0);
    }

    #[test]
    fn quenched_covariance_is_reproducible() {
        let a = IllConditionedGaussian::new(42, 20).unwrap();
        let b = IllConditionedGaussian::new(42, 20).unwrap();
        assert_eq!(a.precision, b.precision);
        assert_eq!(a.eigenvalues, b.eigenvalues);
        let c = IllConditionedGaussian::new(43, 20).unwrap();
        assert_ne!(a.eigenvalues, c.eigenvalues);
    }

    #[test]
    fn rejects_zero_dimension() {
        assert!(matches!(IllConditionedGaussian::new(0, 0), Err(TargetError::Dimension { .. })));
    }

    #[test]
    fn eigenvalue_spread_at_d100() {
        for seed in 0..5 {
            let g = IllConditionedGaussian::new(seed, 100).unwrap();
            assert!(g.condition_number() >= 1e4, "seed {seed}: {}", g.condition_number());
        }
    }

    #[test]
    fn precision_inverts_covariance() {
        let g = IllConditionedGaussian::new(3, 6).unwrap();
        // Σ = S Sᵀ with S = sqrt_cov; P Σ should be I.
        let s = DMatrix::from_row_slice(6, 6, g.sqrt_cov.data());
        let p = DMatrix::from_row_slice(6, 6, g.precision.data());
        let prod = &p * (&s * s.transpose());
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - want).abs() < 1e-6, "{prod}");
            }
            assert!(((&s * s.transpose())[(i, i)] - g.variances[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_about_origin() {
        let g = IllConditionedGaussian::new(5, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let x: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            assert_eq!(g.log_prob(&x) - g.log_prob(&neg), 0.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Moderate spread so unit-scale finite differences stay well conditioned.
        let g = IllConditionedGaussian::new(9, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (_, grad) = g.log_prob_and_grad(&x).unwrap();
            let p = DMatrix::from_row_slice(5, 5, g.precision.data());
            let exact = -(&p * nalgebra::DVector::from_column_slice(&x));
            assert!(max_rel_err(&grad, exact.as_slice()) < 1e-10);
            let fd = fd_grad(&g, &x, 1e-5);
            assert!(max_rel_err(&grad, &fd) < 1e-5 * g.condition_number().max(1.0));
        }
    }

    #[test]
    fn diagonal_gaussian_is_normalized() {
        let g = DiagonalGaussian::standard(2);
        assert!((g.log_prob(&[0.0, 0.0]) + 2.0 * HALF_LN_2PI).abs() < 1e-15);
        let g = DiagonalGaussian::new(vec![2.0]);
        let want = -0.5 * 0.25 - 2f64.ln() - HALF_LN_2PI;
        assert!((g.log_prob(&[1.0]) - want).abs() < 1e-15);
    }
}
