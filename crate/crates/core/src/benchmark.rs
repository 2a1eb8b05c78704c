//! Bias-versus-time protocol: train a map while tracking the second moments of
//! its pushforward, then run warped HMC and track the moments of the kept
//! half of the chains.
//!
//! Moments are recorded as raw estimates, so the same run can be scored
//! against analytic moments or against a reference run.

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::diagnostics::{squared_bias, BiasCurve, DiagnosticsError, Phase};
use crate::flows::{FlowError, FrozenMap, TransportMap};
use crate::hmc::{standard_normal_init, ChainBatch, ChainRunner, HmcConfig, HmcError, WarpedTarget};
use crate::targets::Target;
use crate::vi::{draw_base_batch, train_map_observed, TrainConfig, TrainResult, ViError};

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Vi(#[from] ViError),
    #[error(transparent)]
    Hmc(#[from] HmcError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasProtocol {
    /// Pushforward samples per training-phase estimate.
    pub variational_samples: usize,
    /// Training steps between training-phase estimates.
    pub train_every: usize,
    /// HMC transitions between sampling-phase estimates.
    pub sample_every: usize,
    pub seed: u64,
}

impl BiasProtocol {
    /// Eight pushforward samples per chain.
    pub fn for_chains(num_chains: usize) -> Self {
        BiasProtocol { variational_samples: 8 * num_chains, train_every: 100, sample_every: 25, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentPoint {
    pub phase: Phase,
    pub t_seconds: f64,
    pub second_moments: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentTrace {
    pub points: Vec<MomentPoint>,
}

impl MomentTrace {
    /// Squared bias of every recorded estimate against `truth`.
    pub fn bias_curve(&self, truth: &[f64], reference_based: bool) -> Result<BiasCurve, DiagnosticsError> {
        let mut curve = BiasCurve { points: Vec::with_capacity(self.points.len()), reference_based };
        for p in &self.points {
            curve.push(p.phase, p.t_seconds, squared_bias(&p.second_moments, truth)?)?;
        }
        Ok(curve)
    }

    pub fn last(&self) -> Option<&MomentPoint> {
        self.points.last()
    }

    fn push(&mut self, phase: Phase, t_seconds: f64, second_moments: Vec<f64>) {
        // Keep timestamps strictly increasing even if the clock did not tick.
        let t = match self.points.last() {
            Some(p) if t_seconds <= p.t_seconds => p.t_seconds + 1e-9,
            _ => t_seconds,
        };
        self.points.push(MomentPoint { phase, t_seconds: t, second_moments });
    }
}

/// Per-component mean of `f(z)²` over `zs`.
pub fn pushforward_moments(map: &FrozenMap, zs: &[Vec<f64>]) -> Vec<f64> {
    let dim = map.dim();
    let sum = zs
        .par_iter()
        .fold(
            || vec![0.0; dim],
            |mut acc, z| {
                let (theta, _) = map.forward(z);
                acc.iter_mut().zip(&theta).for_each(|(a, x)| *a += x * x);
                acc
            },
        )
        .reduce(
            || vec![0.0; dim],
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            },
        );
    sum.into_iter().map(|s| s / zs.len() as f64).collect()
}

/// Trains `map` and records the pushforward moments every
/// `protocol.train_every` steps (and after the last step). Time is training
/// time only.
pub fn train_with_moments(
    map: &TransportMap,
    target: &dyn Target,
    phi: Vec<f64>,
    config: &TrainConfig,
    protocol: &BiasProtocol,
) -> Result<(TrainResult, MomentTrace), BenchmarkError> {
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let zs = draw_base_batch(&mut rng, protocol.variational_samples, map.dim());
    let mut trace = MomentTrace::default();
    let mut failure = None;
    let every = protocol.train_every.max(1);
    let result = train_map_observed(map, target, phi, config, |step, phi, elapsed| {
        if failure.is_some() || !((step + 1) % every == 0 || step + 1 == config.steps) {
            return;
        }
        match map.freeze(phi) {
            Ok(frozen) => trace.push(Phase::ViTraining, elapsed.as_secs_f64(), pushforward_moments(&frozen, &zs)),
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok((result, trace))
}

/// Output of [`sample_with_moments`].
pub struct SampleRun {
    /// Chains in z-space.
    pub batch: ChainBatch,
    pub sampling_time: Duration,
    /// Per-draw sums over chains of `f(z)²`, indexed `[draw][component]`.
    pub theta_square_sums: Vec<Vec<f64>>,
}

impl SampleRun {
    /// Pooled `θ²` moments over the kept half of the first `draws` draws.
    pub fn kept_moments(&self, draws: usize) -> Vec<f64> {
        kept_moments_from(&self.theta_square_sums, draws, self.batch.num_chains)
    }
}

fn square_sums(map: &FrozenMap, batch: &ChainBatch, draws: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    draws
        .into_par_iter()
        .map(|t| {
            let mut acc = vec![0.0; batch.dim];
            for c in 0..batch.num_chains {
                let (theta, _) = map.forward(batch.draw(c, t));
                acc.iter_mut().zip(&theta).for_each(|(a, x)| *a += x * x);
            }
            acc
        })
        .collect()
}

/// Runs warped HMC from standard-normal z-space initial states, recording
/// the kept-half pooled moments every `protocol.sample_every` transitions
/// with times offset by `t_offset`. Moment bookkeeping is excluded from the
/// clock.
pub fn sample_with_moments<T: Target>(
    map: &FrozenMap,
    target: T,
    config: &HmcConfig,
    protocol: &BiasProtocol,
    t_offset: Duration,
    trace: &mut MomentTrace,
) -> Result<SampleRun, BenchmarkError> {
    let warped = WarpedTarget::new(map.clone(), target);
    let mut runner = ChainRunner::new(&warped, config, standard_normal_init(map.dim()))?;
    let mut sums = square_sums(map, runner.batch(), 0..1);
    let every = protocol.sample_every.max(1);
    loop {
        let ran = runner.advance(every);
        if ran == 0 {
            break;
        }
        let draws = runner.batch().num_draws();
        sums.extend(square_sums(map, runner.batch(), draws - ran..draws));
        let t = (t_offset + runner.sampling_time()).as_secs_f64();
        trace.push(Phase::HmcSampling, t, kept_moments_from(&sums, draws, config.num_chains));
    }
    let sampling_time = runner.sampling_time();
    Ok(SampleRun { batch: runner.finish(), sampling_time, theta_square_sums: sums })
}

fn kept_moments_from(sums: &[Vec<f64>], draws: usize, chains: usize) -> Vec<f64> {
    let steps = draws - 1;
    // same window as ChainBatch::kept_range
    let range = if steps == 0 { 0..1 } else { steps / 2 + 1..draws };
    let n = (range.len() * chains) as f64;
    let mut out = vec![0.0; sums[0].len()];
    for t in range {
        out.iter_mut().zip(&sums[t]).for_each(|(o, s)| *o += s);
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}
