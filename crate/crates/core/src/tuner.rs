//! Random search over `(ε, L)` minimizing the tuning objective of short
//! pilot runs.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::DiagnosticsReport;
use crate::hmc::{run_chains, HmcConfig, LEAPFROG_RANGE, STEP_SIZE_RANGE};
use crate::targets::Target;

#[derive(Debug, Error)]
pub enum TunerError {
    #[error("every pilot run was degenerate ({} trials)", trace.len())]
    AllDegenerate { trace: Vec<Trial> },
    #[error("invalid tuner configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TunerConfig {
    pub step_size_range: (f64, f64),
    pub leapfrog_range: (usize, usize),
    /// Number of random pilot configurations.
    pub budget: usize,
    pub pilot_chains: usize,
    pub pilot_steps: usize,
    /// Caps `chains × steps × L` per pilot by shortening the run, never below
    /// `min_pilot_steps`.
    pub max_pilot_grads: Option<u64>,
    pub min_pilot_steps: usize,
    /// Evaluate a 3×3 grid around the best random point afterwards.
    pub refine: bool,
    pub seed: u64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig {
            step_size_range: STEP_SIZE_RANGE,
            leapfrog_range: LEAPFROG_RANGE,
            budget: 30,
            pilot_chains: 64,
            pilot_steps: 500,
            max_pilot_grads: None,
            min_pilot_steps: 40,
            refine: false,
            seed: 0,
        }
    }
}

impl TunerConfig {
    fn validate(&self) -> Result<(), TunerError> {
        let (lo, hi) = self.step_size_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(TunerError::Config(format!("bad step-size range ({lo}, {hi})")));
        }
        let (lo, hi) = self.leapfrog_range;
        if lo == 0 || lo > hi {
            return Err(TunerError::Config(format!("bad leapfrog range ({lo}, {hi})")));
        }
        if self.budget == 0 || self.pilot_chains < 2 || self.pilot_steps < 4 {
            return Err(TunerError::Config("need budget ≥ 1, ≥ 2 pilot chains and ≥ 4 pilot steps".into()));
        }
        Ok(())
    }

    fn pilot_steps_for(&self, num_leapfrog: usize) -> usize {
        match self.max_pilot_grads {
            Some(cap) => {
                let per_step = (self.pilot_chains * num_leapfrog) as u64;
                let fit = (cap / per_step.max(1)) as usize;
                fit.clamp(self.min_pilot_steps.min(self.pilot_steps), self.pilot_steps)
            }
            None => self.pilot_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub trial: usize,
    pub step_size: f64,
    pub num_leapfrog: usize,
    /// NaN when the pilot was degenerate.
    pub max_rhat: f64,
    pub min_ess_per_grad: f64,
    /// `+∞` when the pilot was degenerate.
    pub objective: f64,
    pub acceptance_rate: f64,
    pub pilot_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub step_size: f64,
    pub num_leapfrog: usize,
    pub trace: Vec<Trial>,
}

impl TuneResult {
    pub const CSV_HEADER: &'static str = "trial,step_size,num_leapfrog,max_rhat,min_ess_per_grad,objective";

    pub fn best(&self) -> &Trial {
        &self.trace[argmin(&self.trace).expect("non-empty trace with a finite objective")]
    }

    pub fn csv_body(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for t in &self.trace {
            let _ = writeln!(out, "{},{},{},{},{},{}", t.trial, t.step_size, t.num_leapfrog, t.max_rhat, t.min_ess_per_grad, t.objective);
        }
        out
    }
}

/// Index of the lowest finite objective; ties go to the smaller step size,
/// then the fewer leapfrog steps.
pub fn argmin(trace: &[Trial]) -> Option<usize> {
    trace
        .iter()
        .enumerate()
        .filter(|(_, t)| t.objective.is_finite())
        .min_by(|(_, a), (_, b)| {
            a.objective.total_cmp(&b.objective).then(a.step_size.total_cmp(&b.step_size)).then(a.num_leapfrog.cmp(&b.num_leapfrog))
        })
        .map(|(i, _)| i)
}

fn pilot(target: &(impl Target + ?Sized), config: &TunerConfig, trial: usize, step_size: f64, num_leapfrog: usize) -> Trial {
    let steps = config.pilot_steps_for(num_leapfrog);
    let hmc = HmcConfig {
        step_size,
        num_leapfrog,
        num_chains: config.pilot_chains,
        num_steps: steps,
        seed: config.seed.wrapping_add(1 + trial as u64),
    };
    let dim = target.dim();
    let init = move |rng: &mut ChaCha8Rng| (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let report = run_chains(&hmc, target, init)
        .ok()
        .and_then(|b| DiagnosticsReport::from_batch(&b, std::time::Duration::ZERO, std::time::Duration::ZERO).ok());
    match report {
        Some(r) if r.max_rhat.is_finite() && r.min_ess_per_grad.is_finite() => Trial {
            trial,
            step_size,
            num_leapfrog,
            max_rhat: r.max_rhat,
            min_ess_per_grad: r.min_ess_per_grad,
            objective: r.objective(),
            acceptance_rate: r.acceptance_rate,
            pilot_steps: steps,
        },
        _ => Trial {
            trial,
            step_size,
            num_leapfrog,
            max_rhat: f64::NAN,
            min_ess_per_grad: f64::NAN,
            objective: f64::INFINITY,
            acceptance_rate: f64::NAN,
            pilot_steps: steps,
        },
    }
}

/// Candidate `(ε, L)` pairs drawn from the seed: ε log-uniform, L uniform.
pub fn random_candidates(config: &TunerConfig) -> Vec<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (lo, hi) = (config.step_size_range.0.ln(), config.step_size_range.1.ln());
    let (l_lo, l_hi) = config.leapfrog_range;
    (0..config.budget)
        .map(|_| {
            let eps = if hi > lo { rng.random_range(lo..=hi).exp() } else { lo.exp() };
            (eps, rng.random_range(l_lo..=l_hi))
        })
        .collect()
}

/// Runs one pilot per candidate (plus an optional local grid) in chain space
/// of `target` and returns the argmin of the trace. For warped sampling,
/// pass the warped target.
pub fn tune(target: &(impl Target + ?Sized), config: &TunerConfig) -> Result<TuneResult, TunerError> {
    config.validate()?;
    let mut trace = Vec::new();
    for (i, (eps, l)) in random_candidates(config).into_iter().enumerate() {
        let t = pilot(target, config, i, eps, l);
        log::debug!("trial {i}: eps={eps:.4e} L={l} objective={:.4}", t.objective);
        trace.push(t);
    }
    if config.refine {
        if let Some(best) = argmin(&trace) {
            let (eps0, l0) = (trace[best].step_size, trace[best].num_leapfrog);
            let (e_lo, e_hi) = config.step_size_range;
            let (l_lo, l_hi) = config.leapfrog_range;
            for f in [0.5f64.sqrt(), 1.0, 2f64.sqrt()] {
                for g in [0.75, 1.0, 1.25] {
                    let eps = (eps0 * f).clamp(e_lo, e_hi);
                    let l = ((l0 as f64 * g).round() as usize).clamp(l_lo, l_hi);
                    if trace.iter().any(|t| t.step_size == eps && t.num_leapfrog == l) {
                        continue;
                    }
                    let t = pilot(target, config, trace.len(), eps, l);
                    trace.push(t);
                }
            }
        }
    }
    match argmin(&trace) {
        Some(i) => Ok(TuneResult { step_size: trace[i].step_size, num_leapfrog: trace[i].num_leapfrog, trace }),
        None => Err(TunerError::AllDegenerate { trace }),
    }
}
