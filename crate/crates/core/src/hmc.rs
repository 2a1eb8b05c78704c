//! Euclidean HMC with a leapfrog integrator and identity mass matrix.
//!
//! Preconditioning is expressed only through transport maps: sampling in
//! warped coordinates means running HMC on a [`WarpedTarget`] and pushing the
//! resulting chains forward with [`pushforward`].

use std::io::{self, Read, Write};
use std::ops::Range;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::flows::FrozenMap;
use crate::targets::Target;

/// Proposals whose energy error exceeds this are treated as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;
/// Step-size range searched by the tuner.
pub const STEP_SIZE_RANGE: (f64, f64) = (1e-4, 5.0);
/// Leapfrog-step range searched by the tuner.
pub const LEAPFROG_RANGE: (usize, usize) = (1, 100);

#[derive(Debug, Error)]
pub enum HmcError {
    #[error("initial point for chain {chain} has non-finite log density or gradient")]
    BadInit { chain: usize },
    #[error("initial draw for chain {chain} has dimension {got}, target has {expected}")]
    InitDimension { chain: usize, expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("Jacobian is singular (|det| = {det:e})")]
    Singular { det: f64 },
    #[error("chain dump i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed chain dump: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size: f64,
    pub num_leapfrog: usize,
    pub num_chains: usize,
    pub num_steps: usize,
    pub seed: u64,
}

impl HmcConfig {
    pub fn validate(&self) -> Result<(), HmcError> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(HmcError::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.num_leapfrog == 0 {
            return Err(HmcError::Config("need at least one leapfrog step".into()));
        }
        if self.num_chains == 0 {
            return Err(HmcError::Config("need at least one chain".into()));
        }
        Ok(())
    }
}

/// `log p(f(z)) + log|∂f/∂z|`: the target pulled back through a frozen map.
pub struct WarpedTarget<T> {
    map: FrozenMap,
    target: T,
    name: String,
}

impl<T: Target> WarpedTarget<T> {
    pub fn new(map: FrozenMap, target: T) -> Self {
        assert_eq!(map.dim(), target.dim(), "map and target dimensions differ");
        let name = format!("{}@{}", target.name(), map.map().spec().kind.label());
        WarpedTarget { map, target, name }
    }

    pub fn map(&self) -> &FrozenMap {
        &self.map
    }

    pub fn inner(&self) -> &T {
        &self.target
    }
}

impl<T: Target> Target for WarpedTarget<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn log_prob_on<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Var<'t> {
        let (theta, logdet) = self.map.forward_on(tape, z);
        self.target.log_prob_on(tape, theta) + logdet
    }
}

/// End state of a leapfrog trajectory.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub log_prob: f64,
    pub grad: Vec<f64>,
    /// A non-finite density or gradient was hit; remaining fields are then
    /// meaningless.
    pub divergent: bool,
    /// Gradient evaluations performed.
    pub grad_evals: u64,
}

/// Integrates `steps` leapfrog updates from `(z, m)`, given the gradient of the
/// log-density at `z`. `grad_fn` returns `None` when the density or gradient
/// is not finite. If `path` is given, every position (start included) is
/// appended to it.
#[allow(clippy::too_many_arguments)]
pub fn leapfrog<F>(
    z: &[f64],
    m: &[f64],
    log_prob: f64,
    grad: &[f64],
    step_size: f64,
    steps: usize,
    mut grad_fn: F,
    mut path: Option<&mut Vec<Vec<f64>>>,
) -> Trajectory
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut pos = z.to_vec();
    let mut mom = m.to_vec();
    let mut lp = log_prob;
    let mut g = grad.to_vec();
    let mut evals = 0;
    if let Some(p) = path.as_deref_mut() {
        p.push(pos.clone());
    }
    let half = 0.5 * step_size;
    for _ in 0..steps {
        mom.iter_mut().zip(&g).for_each(|(m, g)| *m += half * g);
        pos.iter_mut().zip(&mom).for_each(|(x, m)| *x += step_size * m);
        evals += 1;
        match grad_fn(&pos) {
            Some((l, new_g)) => {
                lp = l;
                g = new_g;
            }
            None => {
                return Trajectory { position: pos, momentum: mom, log_prob: f64::NAN, grad: g, divergent: true, grad_evals: evals };
            }
        }
        mom.iter_mut().zip(&g).for_each(|(m, g)| *m += half * g);
        if let Some(p) = path.as_deref_mut() {
            p.push(pos.clone());
        }
    }
    Trajectory { position: pos, momentum: mom, log_prob: lp, grad: g, divergent: false, grad_evals: evals }
}

/// `log π` and its gradient, or `None` if either is not finite.
pub fn finite_grad(target: &(impl Target + ?Sized), x: &[f64]) -> Option<(f64, Vec<f64>)> {
    match target.log_prob_and_grad(x) {
        Ok((lp, g)) if g.iter().all(|v| v.is_finite()) => Some((lp, g)),
        _ => None,
    }
}

fn kinetic(m: &[f64]) -> f64 {
    0.5 * m.iter().map(|v| v * v).sum::<f64>()
}

/// One chain: position with its cached log-density and gradient, and the
/// chain's own random stream.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub position: Vec<f64>,
    pub log_prob: f64,
    pub grad: Vec<f64>,
    pub rng: ChaCha8Rng,
    pub grad_evals: u64,
}

impl ChainState {
    pub fn new(target: &(impl Target + ?Sized), position: Vec<f64>, rng: ChaCha8Rng) -> Option<Self> {
        let (log_prob, grad) = finite_grad(target, &position)?;
        Some(ChainState { position, log_prob, grad, rng, grad_evals: 1 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub accepted: bool,
    /// `H(proposal) − H(current)`; `+∞` for divergent trajectories.
    pub delta_h: f64,
    pub divergent: bool,
}

/// One HMC transition: fresh momentum, `num_leapfrog` leapfrog steps,
/// Metropolis accept/reject.
pub fn hmc_step(state: &mut ChainState, step_size: f64, num_leapfrog: usize, target: &(impl Target + ?Sized)) -> StepOutcome {
    let dim = state.position.len();
    let m: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut state.rng)).collect();
    let traj = leapfrog(&state.position, &m, state.log_prob, &state.grad, step_size, num_leapfrog, |x| finite_grad(target, x), None);
    state.grad_evals += traj.grad_evals;
    let h0 = -state.log_prob + kinetic(&m);
    let delta_h = if traj.divergent { f64::INFINITY } else { -traj.log_prob + kinetic(&traj.momentum) - h0 };
    let divergent = traj.divergent || !delta_h.is_finite() || delta_h.abs() > DIVERGENCE_THRESHOLD;
    // Always draw the uniform so the stream position does not depend on the
    // outcome.
    let u: f64 = state.rng.random();
    let accepted = !divergent && u.ln() < -delta_h;
    if accepted {
        state.position = traj.position;
        state.log_prob = traj.log_prob;
        state.grad = traj.grad;
    }
    StepOutcome { accepted, delta_h: if traj.divergent { f64::INFINITY } else { delta_h }, divergent }
}

/// `num_chains × num_draws × dim` samples (draw 0 is the initial state) with
/// per-transition acceptance flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainBatch {
    pub num_chains: usize,
    pub dim: usize,
    num_draws: usize,
    stride: usize,
    samples: Vec<f64>,
    accepted: Vec<bool>,
    /// Total target-gradient evaluations over all chains.
    pub grad_evals: u64,
    pub step_size: f64,
    pub num_leapfrog: usize,
    pub seed: u64,
}

impl ChainBatch {
    fn with_capacity(num_chains: usize, dim: usize, max_draws: usize, config: &HmcConfig) -> Self {
        ChainBatch {
            num_chains,
            dim,
            num_draws: 0,
            stride: max_draws,
            samples: vec![0.0; num_chains * max_draws * dim],
            accepted: vec![false; num_chains * max_draws.saturating_sub(1)],
            grad_evals: 0,
            step_size: config.step_size,
            num_leapfrog: config.num_leapfrog,
            seed: config.seed,
        }
    }

    /// Draws per chain, including the initial state.
    pub fn num_draws(&self) -> usize {
        self.num_draws
    }

    pub fn num_steps(&self) -> usize {
        self.num_draws.saturating_sub(1)
    }

    pub fn draw(&self, chain: usize, t: usize) -> &[f64] {
        assert!(t < self.num_draws, "draw {t} out of range ({} draws)", self.num_draws);
        let start = (chain * self.stride + t) * self.dim;
        &self.samples[start..start + self.dim]
    }

    pub fn accepted(&self, chain: usize, step: usize) -> bool {
        assert!(step < self.num_steps());
        self.accepted[chain * self.stride.saturating_sub(1) + step]
    }

    /// Draws kept for estimation: the second half of the transitions, with
    /// the initial state and the first half discarded. With no transitions,
    /// only the initial state.
    pub fn kept_range(&self) -> Range<usize> {
        let steps = self.num_steps();
        if steps == 0 {
            0..self.num_draws
        } else {
            steps / 2 + 1..self.num_draws
        }
    }

    /// `chains[c][t]` = component `d` of draw `range.start + t` of chain `c`.
    pub fn component(&self, d: usize, range: Range<usize>) -> Vec<Vec<f64>> {
        (0..self.num_chains).map(|c| range.clone().map(|t| self.draw(c, t)[d]).collect()).collect()
    }

    pub fn acceptance_rate(&self) -> f64 {
        let steps = self.num_steps();
        if steps == 0 {
            return f64::NAN;
        }
        let n: usize = (0..self.num_chains).map(|c| (0..steps).filter(|&s| self.accepted(c, s)).count()).sum();
        n as f64 / (self.num_chains * steps) as f64
    }

    /// Per-component mean of `x²` over the given draws of all chains.
    pub fn second_moments(&self, range: Range<usize>) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for c in 0..self.num_chains {
            for t in range.clone() {
                acc.iter_mut().zip(self.draw(c, t)).for_each(|(a, x)| *a += x * x);
            }
        }
        let n = (self.num_chains * range.len()) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    fn chain_slices_mut(&mut self) -> impl IndexedParallelIterator<Item = (&mut [f64], &mut [bool])> {
        let sample_stride = self.stride * self.dim;
        let accept_stride = self.stride.saturating_sub(1).max(1);
        self.samples.par_chunks_mut(sample_stride.max(1)).zip(self.accepted.par_chunks_mut(accept_stride))
    }
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    chains: usize,
    draws: usize,
    dim: usize,
    seed: u64,
    step_size: f64,
    num_leapfrog: usize,
    grad_evals: u64,
}

const DUMP_MAGIC: &[u8; 8] = b"THMCCHN1";

impl ChainBatch {
    /// Binary dump: 8-byte magic, little-endian u64 header length, JSON header
    /// (`chains, draws, dim, seed, step_size, num_leapfrog, grad_evals`), then
    /// `chains × draws × dim` little-endian f64 samples (chain-major), then
    /// `chains × (draws − 1)` acceptance bytes.
    pub fn write_dump(&self, mut w: impl Write) -> Result<(), HmcError> {
        let header = DumpHeader {
            chains: self.num_chains,
            draws: self.num_draws,
            dim: self.dim,
            seed: self.seed,
            step_size: self.step_size,
            num_leapfrog: self.num_leapfrog,
            grad_evals: self.grad_evals,
        };
        let header = serde_json::to_vec(&header).map_err(|e| HmcError::Format(e.to_string()))?;
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for c in 0..self.num_chains {
            for t in 0..self.num_draws {
                for x in self.draw(c, t) {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        for c in 0..self.num_chains {
            for s in 0..self.num_steps() {
                w.write_all(&[self.accepted(c, s) as u8])?;
            }
        }
        Ok(())
    }

    pub fn read_dump(mut r: impl Read) -> Result<Self, HmcError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(HmcError::Format("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let h: DumpHeader = serde_json::from_slice(&header).map_err(|e| HmcError::Format(e.to_string()))?;
        let config = HmcConfig { step_size: h.step_size, num_leapfrog: h.num_leapfrog, num_chains: h.chains, num_steps: 0, seed: h.seed };
        let mut batch = ChainBatch::with_capacity(h.chains, h.dim, h.draws, &config);
        batch.num_draws = h.draws;
        batch.grad_evals = h.grad_evals;
        let mut buf = [0u8; 8];
        for x in batch.samples.iter_mut() {
            r.read_exact(&mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
        let mut flag = [0u8; 1];
        for a in batch.accepted.iter_mut() {
            r.read_exact(&mut flag)?;
            *a = flag[0] != 0;
        }
        Ok(batch)
    }
}

/// Independent random stream for `chain` under `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Advances a set of chains in blocks of transitions. Chains run in parallel;
/// each owns its state and random stream, so results do not depend on
/// scheduling or on how the run is split into blocks.
pub struct ChainRunner<'a, T: ?Sized> {
    target: &'a T,
    config: HmcConfig,
    chains: Vec<ChainState>,
    batch: ChainBatch,
    sampling_time: Duration,
}

impl<'a, T: Target + ?Sized> ChainRunner<'a, T> {
    /// Initializes `config.num_chains` chains with `init(rng)`, drawn from each
    /// chain's own stream.
    pub fn new<I>(target: &'a T, config: &HmcConfig, init: I) -> Result<Self, HmcError>
    where
        I: Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
    {
        config.validate()?;
        let dim = target.dim();
        let start = Instant::now();
        let chains = (0..config.num_chains)
            .into_par_iter()
            .map(|c| {
                let mut rng = chain_rng(config.seed, c);
                let x = init(&mut rng);
                if x.len() != dim {
                    return Err(HmcError::InitDimension { chain: c, expected: dim, got: x.len() });
                }
                ChainState::new(target, x, rng).ok_or(HmcError::BadInit { chain: c })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut batch = ChainBatch::with_capacity(config.num_chains, dim, config.num_steps + 1, config);
        for (c, state) in chains.iter().enumerate() {
            let start = c * batch.stride * dim;
            batch.samples[start..start + dim].copy_from_slice(&state.position);
        }
        batch.num_draws = 1;
        let mut runner = ChainRunner { target, config: config.clone(), chains, batch, sampling_time: Duration::ZERO };
        runner.sampling_time = start.elapsed();
        runner.sync_grad_count();
        Ok(runner)
    }

    fn sync_grad_count(&mut self) {
        self.batch.grad_evals = self.chains.iter().map(|c| c.grad_evals).sum();
    }

    pub fn steps_done(&self) -> usize {
        self.batch.num_steps()
    }

    pub fn batch(&self) -> &ChainBatch {
        &self.batch
    }

    pub fn sampling_time(&self) -> Duration {
        self.sampling_time
    }

    /// Runs up to `steps` more transitions on every chain (capped at
    /// `num_steps`) and returns how many were run.
    pub fn advance(&mut self, steps: usize) -> usize {
        let done = self.steps_done();
        let steps = steps.min(self.config.num_steps - done);
        if steps == 0 {
            return 0;
        }
        let start = Instant::now();
        let (eps, l, dim) = (self.config.step_size, self.config.num_leapfrog, self.batch.dim);
        let target = self.target;
        self.batch.chain_slices_mut().zip(self.chains.par_iter_mut()).for_each(|((samples, accepted), state)| {
            for s in done..done + steps {
                let out = hmc_step(state, eps, l, target);
                accepted[s] = out.accepted;
                samples[(s + 1) * dim..(s + 2) * dim].copy_from_slice(&state.position);
            }
        });
        self.batch.num_draws += steps;
        self.sampling_time += start.elapsed();
        self.sync_grad_count();
        steps
    }

    pub fn finish(mut self) -> ChainBatch {
        let remaining = self.config.num_steps - self.steps_done();
        self.advance(remaining);
        self.batch
    }

    pub fn chains(&self) -> &[ChainState] {
        &self.chains
    }
}

/// Runs all chains to completion.
pub fn run_chains<T, I>(config: &HmcConfig, target: &T, init: I) -> Result<ChainBatch, HmcError>
where
    T: Target + ?Sized,
    I: Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
{
    Ok(ChainRunner::new(target, config, init)?.finish())
}

/// Standard-normal initial draws.
pub fn standard_normal_init(dim: usize) -> impl Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync {
    move |rng| (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Maps every draw of `batch` through `map`.
pub fn pushforward(map: &FrozenMap, batch: &ChainBatch) -> ChainBatch {
    pushforward_draws(map, batch, 0..batch.num_draws)
}

/// Maps the given draws of every chain through `map`; other draws are
/// dropped, so draw `range.start` becomes draw 0.
pub fn pushforward_draws(map: &FrozenMap, batch: &ChainBatch, range: Range<usize>) -> ChainBatch {
    let mut out = batch.clone();
    out.stride = range.len();
    out.num_draws = range.len();
    out.samples = vec![0.0; batch.num_chains * range.len() * batch.dim];
    out.accepted = (0..batch.num_chains).flat_map(|c| range.clone().skip(1).map(move |t| batch.accepted(c, t - 1))).collect();
    let dim = batch.dim;
    out.samples.par_chunks_mut((range.len() * dim).max(1)).enumerate().for_each(|(c, chunk)| {
        for (k, t) in range.clone().enumerate() {
            let (theta, _) = map.forward(batch.draw(c, t));
            chunk[k * dim..(k + 1) * dim].copy_from_slice(&theta);
        }
    });
    out
}

/// Largest `|H_NT − H_RM|` over `points = [(z, m)]`, where
///
/// ```text
/// H_NT = −ℓ(f(z)) − log|J| + ½ mᵀm
/// H_RM = −ℓ(θ) + ½ m'ᵀ G⁻¹ m' + ½ log|G|,  G = (J Jᵀ)⁻¹,  m' = J⁻ᵀ m
/// ```
///
/// with `J = ∂f/∂z`. `H_NT` uses the map's analytic log-determinant; `H_RM`
/// is assembled from the explicit Jacobian with dense linear algebra.
pub fn check_rmhmc_equivalence(map: &FrozenMap, target: &(impl Target + ?Sized), points: &[(Vec<f64>, Vec<f64>)]) -> Result<f64, HmcError> {
    let d = map.dim();
    let mut worst: f64 = 0.0;
    for (z, m) in points {
        let (theta, logdet) = map.forward(z);
        let ell = target.log_prob(&theta);
        let h_nt = -ell - logdet + kinetic(m);

        let j = DMatrix::from_row_slice(d, d, &map.jacobian(z));
        let det = j.determinant();
        if det.abs() < 1e-12 {
            return Err(HmcError::Singular { det });
        }
        let g = (&j * j.transpose()).try_inverse().ok_or(HmcError::Singular { det })?;
        let g_inv = g.clone().try_inverse().ok_or(HmcError::Singular { det })?;
        let mv = nalgebra::DVector::from_column_slice(m);
        let m_prime = j.transpose().lu().solve(&mv).ok_or(HmcError::Singular { det })?;
        let quad = (m_prime.transpose() * &g_inv * &m_prime)[(0, 0)];
        let h_rm = -ell + 0.5 * quad + 0.5 * g.determinant().ln();
        worst = worst.max((h_nt - h_rm).abs());
    }
    Ok(worst)
}
