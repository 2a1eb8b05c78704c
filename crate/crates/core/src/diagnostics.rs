//! Convergence and efficiency diagnostics computed on the per-component
//! second moment `x²`.

use std::fmt::Write as _;
use std::time::Duration;

use rand::RngCore;
use rayon::prelude::*;
use thiserror::Error;

use crate::hmc::ChainBatch;
use crate::targets::Target;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("need at least {min} chains, got {got}")]
    TooFewChains { min: usize, got: usize },
    #[error("need at least 2 draws per chain, got {0}")]
    TooFewDraws(usize),
    #[error("chains have different lengths")]
    Ragged,
    #[error("component {0} has zero within-chain variance")]
    Degenerate(usize),
    #[error("estimate has {got} components, truth has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("bias curve times must strictly increase ({prev} then {next})")]
    NonIncreasingTime { prev: f64, next: f64 },
}

fn check_shape(seqs: &[Vec<f64>], min_chains: usize) -> Result<usize, DiagnosticsError> {
    if seqs.len() < min_chains {
        return Err(DiagnosticsError::TooFewChains { min: min_chains, got: seqs.len() });
    }
    let n = seqs[0].len();
    if seqs.iter().any(|s| s.len() != n) {
        return Err(DiagnosticsError::Ragged);
    }
    if n < 2 {
        return Err(DiagnosticsError::TooFewDraws(n));
    }
    Ok(n)
}

fn squared(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    chains.iter().map(|c| c.iter().map(|x| x * x).collect()).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// R̂ of already-transformed sequences `seqs[chain][draw]`.
pub fn rhat_of(seqs: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    let n = check_shape(seqs, 2)?;
    let m = seqs.len();
    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let grand = mean(&means);
    let b = n as f64 * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m - 1) as f64;
    let w = seqs.iter().zip(&means).map(|(s, mu)| s.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sum::<f64>() / m as f64;
    if w <= 0.0 || !w.is_finite() {
        return Err(DiagnosticsError::Degenerate(0));
    }
    let nf = n as f64;
    Ok((((nf - 1.0) / nf * w + b / nf) / w).sqrt())
}

/// Potential scale reduction of `x²` for one component, `chains[chain][draw]`.
pub fn potential_scale_reduction(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    rhat_of(&squared(chains))
}

/// ESS of already-transformed sequences. Autocorrelations are computed per
/// chain around the chain's own mean, averaged over chains, and summed in
/// adjacent pairs until a pair goes non-positive.
pub fn ess_of(seqs: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    let n = check_shape(seqs, 1)?;
    let m = seqs.len();
    let centered: Vec<Vec<f64>> = seqs
        .iter()
        .map(|s| {
            let mu = mean(s);
            s.iter().map(|x| x - mu).collect()
        })
        .collect();
    let autocov = |c: &[f64], lag: usize| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let var0: Vec<f64> = centered.iter().map(|c| autocov(c, 0)).collect();
    if var0.iter().all(|v| *v <= 0.0) {
        return Err(DiagnosticsError::Degenerate(0));
    }
    // A chain stuck at a constant value carries no information: treat it as
    // perfectly correlated.
    let rho =
        |lag: usize| centered.iter().zip(&var0).map(|(c, v0)| if *v0 > 0.0 { autocov(c, lag) / v0 } else { 1.0 }).sum::<f64>() / m as f64;

    let mut pair_sum = 0.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = if lag == 0 { 1.0 + rho(1) } else { rho(lag) + rho(lag + 1) };
        if pair <= 0.0 {
            break;
        }
        pair_sum += pair;
        lag += 2;
    }
    // τ = 1 + 2 Σ_{t≥1} ρ_t = −1 + 2 Σ_k (ρ_{2k} + ρ_{2k+1})
    let tau = (2.0 * pair_sum - 1.0).max(1.0);
    let total = (m * n) as f64;
    Ok((total / tau).min(total))
}

/// Effective sample size of `x²` for one component.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    ess_of(&squared(chains))
}

/// Mean over components of `(estimate − truth)²`.
pub fn squared_bias(estimate: &[f64], truth: &[f64]) -> Result<f64, DiagnosticsError> {
    if estimate.len() != truth.len() {
        return Err(DiagnosticsError::Dimension { expected: truth.len(), got: estimate.len() });
    }
    Ok(estimate.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / truth.len() as f64)
}

/// Per-component mean of `x²` over `samples`.
pub fn second_moments(samples: &[Vec<f64>]) -> Vec<f64> {
    let dim = samples.first().map_or(0, |s| s.len());
    let mut acc = vec![0.0; dim];
    for s in samples {
        acc.iter_mut().zip(s).for_each(|(a, x)| *a += x * x);
    }
    acc.iter_mut().for_each(|a| *a /= samples.len() as f64);
    acc
}

/// Expected squared bias of a second-moment estimate from `n` exact draws,
/// averaged over `replicates` independent estimates. `None` if the target
/// has no exact sampler or no analytic moments.
pub fn iid_noise_floor(target: &(impl Target + ?Sized), n: usize, replicates: usize, rng: &mut dyn RngCore) -> Option<f64> {
    let truth = target.true_second_moments()?;
    let mut total = 0.0;
    for _ in 0..replicates {
        let mut acc = vec![0.0; truth.len()];
        for _ in 0..n {
            let x = target.sample_exact(rng)?;
            acc.iter_mut().zip(&x).for_each(|(a, v)| *a += v * v);
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        total += squared_bias(&acc, truth).ok()?;
    }
    Some(total / replicates as f64)
}

/// Tuning objective `R̂ − exp(−(R̂−1)²/0.02) · ESS/grad`; lower is better.
pub fn tuning_objective(max_rhat: f64, min_ess_per_grad: f64) -> f64 {
    max_rhat - (-(max_rhat - 1.0).powi(2) / 0.02).exp() * min_ess_per_grad
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentDiagnostics {
    pub rhat: f64,
    pub ess: f64,
    pub ess_per_grad: f64,
    pub ess_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsReport {
    pub components: Vec<ComponentDiagnostics>,
    pub max_rhat: f64,
    pub min_ess_per_grad: f64,
    pub acceptance_rate: f64,
    pub grad_evals: u64,
    pub num_chains: usize,
    pub kept_draws: usize,
    pub train_seconds: f64,
    pub sample_seconds: f64,
}

impl DiagnosticsReport {
    pub const CSV_HEADER: &'static str = "component,rhat,ess,ess_per_grad,ess_per_sec";

    /// Diagnostics over the kept half of `batch`. ESS/grad divides by all
    /// gradient evaluations of the run, warm-up included.
    pub fn from_batch(batch: &ChainBatch, sample_time: Duration, train_time: Duration) -> Result<Self, DiagnosticsError> {
        let range = batch.kept_range();
        let secs = sample_time.as_secs_f64();
        let components = (0..batch.dim)
            .into_par_iter()
            .map(|d| {
                let seqs = squared(&batch.component(d, range.clone()));
                let rhat = rhat_of(&seqs).map_err(|_| DiagnosticsError::Degenerate(d))?;
                let ess = ess_of(&seqs).map_err(|_| DiagnosticsError::Degenerate(d))?;
                Ok(ComponentDiagnostics {
                    rhat,
                    ess,
                    ess_per_grad: ess / batch.grad_evals.max(1) as f64,
                    ess_per_sec: if secs > 0.0 { ess / secs } else { f64::INFINITY },
                })
            })
            .collect::<Result<Vec<_>, DiagnosticsError>>()?;
        let max_rhat = components.iter().map(|c| c.rhat).fold(f64::NEG_INFINITY, f64::max);
        let min_ess_per_grad = components.iter().map(|c| c.ess_per_grad).fold(f64::INFINITY, f64::min);
        Ok(DiagnosticsReport {
            components,
            max_rhat,
            min_ess_per_grad,
            acceptance_rate: batch.acceptance_rate(),
            grad_evals: batch.grad_evals,
            num_chains: batch.num_chains,
            kept_draws: range.len(),
            train_seconds: train_time.as_secs_f64(),
            sample_seconds: secs,
        })
    }

    pub fn objective(&self) -> f64 {
        tuning_objective(self.max_rhat, self.min_ess_per_grad)
    }

    /// Summary as `key=value` pairs, for metadata comment blocks.
    pub fn summary(&self) -> Vec<(&'static str, String)> {
        vec![
            ("max_rhat", format!("{}", self.max_rhat)),
            ("min_ess_per_grad", format!("{}", self.min_ess_per_grad)),
            ("acceptance_rate", format!("{}", self.acceptance_rate)),
            ("grad_evals", self.grad_evals.to_string()),
            ("chains", self.num_chains.to_string()),
            ("kept_draws", self.kept_draws.to_string()),
            ("train_seconds", format!("{}", self.train_seconds)),
            ("sample_seconds", format!("{}", self.sample_seconds)),
            ("note", "initialization is underdispersed so rhat is a lower bound".into()),
        ]
    }

    /// Header row and one row per component.
    pub fn csv_body(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (i, c) in self.components.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{},{}", c.rhat, c.ess, c.ess_per_grad, c.ess_per_sec);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    ViTraining,
    HmcSampling,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::ViTraining => "vi-training",
            Phase::HmcSampling => "hmc-sampling",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasPoint {
    pub phase: Phase,
    pub t_seconds: f64,
    pub mean_sq_bias: f64,
}

/// Squared bias of second moments against wall-clock time. The phase change
/// from training to sampling marks the end of training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BiasCurve {
    pub points: Vec<BiasPoint>,
    /// Bias measured against a reference run rather than analytic moments.
    pub reference_based: bool,
}

impl BiasCurve {
    pub const CSV_HEADER: &'static str = "phase,t_seconds,mean_sq_bias";

    pub fn push(&mut self, phase: Phase, t_seconds: f64, mean_sq_bias: f64) -> Result<(), DiagnosticsError> {
        if let Some(last) = self.points.last() {
            if t_seconds <= last.t_seconds {
                return Err(DiagnosticsError::NonIncreasingTime { prev: last.t_seconds, next: t_seconds });
            }
        }
        self.points.push(BiasPoint { phase, t_seconds, mean_sq_bias });
        Ok(())
    }

    /// Time of the last training point, if the curve has both phases.
    pub fn phase_boundary(&self) -> Option<f64> {
        let i = self.points.iter().position(|p| p.phase == Phase::HmcSampling)?;
        (i > 0).then(|| self.points[i - 1].t_seconds)
    }

    pub fn last_in(&self, phase: Phase) -> Option<&BiasPoint> {
        self.points.iter().rev().find(|p| p.phase == phase)
    }

    pub fn csv_body(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.phase.label(), p.t_seconds, p.mean_sq_bias);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{DiagonalGaussian, Funnel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_chains(m: usize, n: usize, shift: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|c| (0..n).map(|_| shift[c] + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect())
            .collect()
    }

    fn ar1(m: usize, n: usize, rho: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let innov = (1.0 - rho * rho).sqrt();
        (0..m)
            .map(|_| {
                let mut x: f64 = StandardNormal.sample(&mut rng);
                (0..n)
                    .map(|_| {
                        x = rho * x + innov * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                        x
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn rhat_same_distribution() {
        let r = potential_scale_reduction(&normal_chains(2, 10_000, &[0.0, 0.0], 1)).unwrap();
        assert!((0.999..=1.01).contains(&r), "{r}");
    }

    #[test]
    fn rhat_shifted_chains() {
        let r = potential_scale_reduction(&normal_chains(2, 1000, &[0.0, 5.0], 2)).unwrap();
        assert!(r > 1.5, "{r}");
    }

    #[test]
    fn rhat_hand_computed() {
        // x² sequences [1,4] and [9,16]: W = (4.5 + 24.5)/2 = 14.5, B = 2·var(2.5, 12.5) = 100
        let r = potential_scale_reduction(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let want = ((0.5 * 14.5 + 50.0) / 14.5f64).sqrt();
        assert!((r - want).abs() < 1e-14);
    }

    #[test]
    fn rhat_scale_invariant() {
        let chains = normal_chains(4, 200, &[0.0, 0.3, 0.0, -0.2], 3);
        let scaled: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|x| -3.7 * x).collect()).collect();
        let (a, b) = (potential_scale_reduction(&chains).unwrap(), potential_scale_reduction(&scaled).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(potential_scale_reduction(&[vec![2.0; 5], vec![2.0; 5]]), Err(DiagnosticsError::Degenerate(0)));
        assert_eq!(effective_sample_size(&[vec![1.0; 5]]), Err(DiagnosticsError::Degenerate(0)));
        assert!(matches!(potential_scale_reduction(&[vec![1.0, 2.0]]), Err(DiagnosticsError::TooFewChains { .. })));
        assert_eq!(potential_scale_reduction(&[vec![1.0], vec![2.0]]), Err(DiagnosticsError::TooFewDraws(1)));
        assert_eq!(effective_sample_size(&[vec![1.0, 2.0], vec![1.0]]), Err(DiagnosticsError::Ragged));
    }

    #[test]
    fn ess_of_iid() {
        let chains = normal_chains(4, 5000, &[0.0; 4], 4);
        let frac = effective_sample_size(&chains).unwrap() / 20_000.0;
        assert!((0.8..=1.2).contains(&frac), "{frac}");
    }

    #[test]
    fn ess_of_ar1_squares() {
        let rho: f64 = 0.9;
        let chains = ar1(8, 20_000, rho, 5);
        // For a stationary Gaussian AR(1), corr(x_t², x_{t+k}²) = ρ^{2k}, so the
        // squared sequence is itself AR(1)-like with ρ' = ρ².
        let lag1 = {
            let sq = squared(&chains);
            let mut num = 0.0;
            let mut den = 0.0;
            for s in &sq {
                let mu = mean(s);
                num += s.windows(2).map(|w| (w[0] - mu) * (w[1] - mu)).sum::<f64>();
                den += s.iter().map(|x| (x - mu).powi(2)).sum::<f64>();
            }
            num / den
        };
        assert!((lag1 - rho * rho).abs() < 0.02, "{lag1}");
        let want = (1.0 - lag1) / (1.0 + lag1);
        let got = effective_sample_size(&chains).unwrap() / (8.0 * 20_000.0);
        assert!((got / want - 1.0).abs() < 0.2, "{got} vs {want}");
    }

    #[test]
    fn ess_bounded_for_antithetic_chain() {
        let chain: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { 2.0 }).collect();
        let ess = effective_sample_size(&[chain]).unwrap();
        assert!(ess > 0.0 && ess <= 1000.0);
    }

    #[test]
    fn bias_examples() {
        assert_eq!(squared_bias(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(squared_bias(&[2.0, 2.0], &[1.0, 4.0]).unwrap(), 2.5);
        assert!(squared_bias(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn iid_floor_matches_estimator_variance() {
        // x ~ N(0,1): Var(x²) = 2, so the floor is 2/n.
        let target = DiagonalGaussian::standard(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let floor = iid_noise_floor(&target, 400, 200, &mut rng).unwrap();
        assert!((floor / (2.0 / 400.0) - 1.0).abs() < 0.15, "{floor}");
        let funnel = Funnel::new(3).unwrap();
        assert!(iid_noise_floor(&funnel, 10, 2, &mut rng).unwrap() > 0.0);
    }

    #[test]
    fn objective_values() {
        assert!((tuning_objective(1.0, 0.1) - 0.9).abs() < 1e-15);
        assert!((tuning_objective(1.2, 0.1) - 1.186_466_471_676_338_7).abs() < 1e-12);
        assert!((tuning_objective(50.0, 0.3) - 50.0).abs() < 1e-300);
        assert!(tuning_objective(1.05, 0.2) < tuning_objective(1.05, 0.1));
    }

    #[test]
    fn bias_curve_rules() {
        let mut curve = BiasCurve::default();
        curve.push(Phase::ViTraining, 0.1, 5.0).unwrap();
        curve.push(Phase::ViTraining, 0.2, 1.0).unwrap();
        assert_eq!(curve.phase_boundary(), None);
        curve.push(Phase::HmcSampling, 0.3, 0.5).unwrap();
        assert_eq!(curve.phase_boundary(), Some(0.2));
        assert!(curve.push(Phase::HmcSampling, 0.3, 0.4).is_err());
        assert_eq!(curve.csv_body(), "phase,t_seconds,mean_sq_bias\nvi-training,0.1,5\nvi-training,0.2,1\nhmc-sampling,0.3,0.5\n");
    }
}
