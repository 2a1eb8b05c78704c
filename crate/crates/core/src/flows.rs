//! Transport maps `θ = f_φ(z)` with exact log-det-Jacobians.
//!
//! A [`TransportMap`] is a fixed sequence of stages (a constant base scale,
//! per-component affine, lower-triangular affine, inverse autoregressive flows,
//! and dimension reversals) over one flat parameter vector `φ`. The map can be
//! recorded on a tape either with `φ` as a differentiable input (training) or
//! with `φ` frozen into precomputed constants (sampling, see [`FrozenMap`]).
//!
//! Only the forward direction is provided.

use std::io;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ConstMatrix, Tape, Var};

/// Pre-activation log-scales of an IAF are clamped to this range.
pub const LOG_SCALE_BOUND: f64 = 10.0;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("parameter vector has length {got}, map needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("non-finite output from stage {stage} ({kind}, flow {flow:?})")]
    NonFinite { stage: usize, kind: &'static str, flow: Option<usize> },
    #[error("only the first map of a stack may carry a base scale")]
    InnerBaseScale,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Elu,
}

/// Shape of a stack of inverse autoregressive flows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IafStackConfig {
    pub num_flows: usize,
    pub hidden_layers: usize,
    /// `None` means "same as the target dimension".
    pub hidden_dim: Option<usize>,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    /// Reverse the dimension order between consecutive flows.
    pub reverse_between: bool,
}

impl Default for IafStackConfig {
    fn default() -> Self {
        IafStackConfig { num_flows: 3, hidden_layers: 2, hidden_dim: None, nonlinearity: Nonlinearity::Elu, reverse_between: true }
    }
}

/// Serializable description of a map's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MapKind {
    Identity,
    Diag,
    Tril,
    Iaf(IafStackConfig),
    Stack { maps: Vec<MapKind> },
}

impl MapKind {
    pub fn label(&self) -> String {
        match self {
            MapKind::Identity => "identity".into(),
            MapKind::Diag => "diag".into(),
            MapKind::Tril => "tril".into(),
            MapKind::Iaf(c) => format!("iaf{}", c.num_flows),
            MapKind::Stack { maps } => maps.iter().map(|m| m.label()).collect::<Vec<_>>().join("+"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub kind: MapKind,
    pub dim: usize,
    /// Fixed scale applied to `z` before the trainable stages.
    pub base_scale: f64,
}

/// A parameter block inside `φ`.
#[derive(Clone, Debug)]
struct Segment {
    offset: usize,
    rows: usize,
    cols: usize,
    mask: Option<Arc<[f64]>>,
}

impl Segment {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug)]
struct IafLayer {
    /// (weight, bias) segments for each hidden layer, then the output layer.
    layers: Vec<(usize, usize)>,
    flow: usize,
}

#[derive(Clone, Debug)]
enum Stage {
    Scale(f64),
    Diag { log_scale: usize, shift: usize },
    Tril { log_diag: usize, lower: usize, shift: usize, index: Arc<[usize]> },
    Iaf(IafLayer),
    Reverse,
}

impl Stage {
    fn kind(&self) -> &'static str {
        match self {
            Stage::Scale(_) => "scale",
            Stage::Diag { .. } => "diag",
            Stage::Tril { .. } => "tril",
            Stage::Iaf(_) => "iaf",
            Stage::Reverse => "reverse",
        }
    }
}

/// Degree of hidden unit `k` for a MADE network over `dim` inputs.
fn hidden_degree(k: usize, dim: usize) -> usize {
    k % dim.saturating_sub(1).max(1) + 1
}

fn mask(rows: usize, cols: usize, connect: impl Fn(usize, usize) -> bool) -> Arc<[f64]> {
    let mut m = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if connect(r, c) {
                m[r * cols + c] = 1.0;
            }
        }
    }
    m.into()
}

/// Parameterized bijection on ℝ^D.
#[derive(Clone, Debug)]
pub struct TransportMap {
    spec: MapSpec,
    stages: Vec<Stage>,
    segments: Vec<Segment>,
    num_params: usize,
}

struct Builder {
    dim: usize,
    stages: Vec<Stage>,
    segments: Vec<Segment>,
    num_params: usize,
    flows: usize,
}

impl Builder {
    fn segment(&mut self, rows: usize, cols: usize, mask: Option<Arc<[f64]>>) -> usize {
        self.segments.push(Segment { offset: self.num_params, rows, cols, mask });
        self.num_params += rows * cols;
        self.segments.len() - 1
    }

    fn vector(&mut self, len: usize) -> usize {
        self.segment(len, 1, None)
    }

    fn last_is_iaf(&self) -> bool {
        matches!(self.stages.last(), Some(Stage::Iaf(_)))
    }

    fn add(&mut self, kind: &MapKind) {
        let d = self.dim;
        match kind {
            MapKind::Identity => {}
            MapKind::Diag => {
                let log_scale = self.vector(d);
                let shift = self.vector(d);
                self.stages.push(Stage::Diag { log_scale, shift });
            }
            MapKind::Tril => {
                let log_diag = self.vector(d);
                let lower = self.vector(d * (d - 1) / 2);
                let shift = self.vector(d);
                // Gather index into concat(exp(log_diag), lower, [0]).
                let zero = d + d * (d - 1) / 2;
                let mut index = vec![zero; d * d];
                let mut k = d;
                for i in 0..d {
                    index[i * d + i] = i;
                    for j in 0..i {
                        index[i * d + j] = k;
                        k += 1;
                    }
                }
                self.stages.push(Stage::Tril { log_diag, lower, shift, index: index.into() });
            }
            MapKind::Iaf(cfg) => {
                let h = cfg.hidden_dim.unwrap_or(d);
                let input_mask = mask(h, d, |k, j| hidden_degree(k, d) > j);
                let hidden_mask = mask(h, h, |k, k0| hidden_degree(k, d) >= hidden_degree(k0, d));
                let output_mask = mask(2 * d, h, |r, k| hidden_degree(k, d) < (r % d) + 1);
                for _ in 0..cfg.num_flows {
                    if cfg.reverse_between && self.last_is_iaf() {
                        self.stages.push(Stage::Reverse);
                    }
                    let mut layers = Vec::with_capacity(cfg.hidden_layers + 1);
                    for l in 0..cfg.hidden_layers {
                        let (cols, m) = if l == 0 { (d, &input_mask) } else { (h, &hidden_mask) };
                        let w = self.segment(h, cols, Some(Arc::clone(m)));
                        let b = self.vector(h);
                        layers.push((w, b));
                    }
                    let cols = if cfg.hidden_layers == 0 { d } else { h };
                    let out_mask = if cfg.hidden_layers == 0 { mask(2 * d, d, |r, j| j < r % d) } else { Arc::clone(&output_mask) };
                    let w = self.segment(2 * d, cols, Some(out_mask));
                    let b = self.vector(2 * d);
                    layers.push((w, b));
                    self.stages.push(Stage::Iaf(IafLayer { layers, flow: self.flows }));
                    self.flows += 1;
                }
            }
            MapKind::Stack { maps } => {
                for m in maps {
                    self.add(m);
                }
            }
        }
    }
}

impl TransportMap {
    pub fn new(spec: MapSpec) -> Result<Self, FlowError> {
        if spec.dim == 0 {
            return Err(FlowError::Dimension { expected: 1, got: 0 });
        }
        let mut b = Builder { dim: spec.dim, stages: Vec::new(), segments: Vec::new(), num_params: 0, flows: 0 };
        if spec.base_scale != 1.0 {
            b.stages.push(Stage::Scale(spec.base_scale));
        }
        b.add(&spec.kind);
        Ok(TransportMap { stages: b.stages, segments: b.segments, num_params: b.num_params, spec })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(MapSpec { kind: MapKind::Identity, dim, base_scale: 1.0 }).expect("valid identity")
    }

    pub fn diag(dim: usize) -> Self {
        Self::new(MapSpec { kind: MapKind::Diag, dim, base_scale: 1.0 }).expect("valid diag")
    }

    pub fn tril(dim: usize) -> Self {
        Self::new(MapSpec { kind: MapKind::Tril, dim, base_scale: 1.0 }).expect("valid tril")
    }

    pub fn iaf(dim: usize, config: IafStackConfig) -> Self {
        Self::new(MapSpec { kind: MapKind::Iaf(config), dim, base_scale: 1.0 }).expect("valid iaf")
    }

    /// Composes maps in order (first map applied first). Parameters of the
    /// parts are concatenated in the same order.
    pub fn stack(maps: &[TransportMap]) -> Result<Self, FlowError> {
        let dim = maps.first().map(|m| m.dim()).unwrap_or(1);
        if let Some(m) = maps.iter().find(|m| m.dim() != dim) {
            return Err(FlowError::Dimension { expected: dim, got: m.dim() });
        }
        // A base scale is only expressible at the front of the stack.
        if maps.iter().skip(1).any(|m| m.spec.base_scale != 1.0) {
            return Err(FlowError::InnerBaseScale);
        }
        let base_scale = maps.first().map(|m| m.spec.base_scale).unwrap_or(1.0);
        let kinds = maps.iter().map(|m| m.spec.kind.clone()).collect();
        Self::new(MapSpec { kind: MapKind::Stack { maps: kinds }, dim, base_scale })
    }

    pub fn with_base_scale(mut self, base_scale: f64) -> Self {
        self.spec.base_scale = base_scale;
        Self::new(self.spec).expect("spec was already valid")
    }

    pub fn spec(&self) -> &MapSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Number of IAF flows in the map.
    pub fn num_flows(&self) -> usize {
        self.stages.iter().filter(|s| matches!(s, Stage::Iaf(_))).count()
    }

    /// Parameters for which the map is `z ↦ base_scale · z`. Hidden IAF
    /// weights are drawn `N(0, 1/fan_in)`; every output layer is zero.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phi = vec![0.0; self.num_params];
        for stage in &self.stages {
            if let Stage::Iaf(layer) = stage {
                let hidden = &layer.layers[..layer.layers.len() - 1];
                for &(w, _) in hidden {
                    let seg = &self.segments[w];
                    let std = 1.0 / (seg.cols as f64).sqrt();
                    for v in &mut phi[seg.offset..seg.offset + seg.len()] {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        *v = std * n;
                    }
                }
            }
        }
        phi
    }

    fn check_params(&self, phi: &[f64]) -> Result<(), FlowError> {
        if phi.len() != self.num_params {
            return Err(FlowError::ParamCount { expected: self.num_params, got: phi.len() });
        }
        Ok(())
    }

    /// Records `f(z)` and `log|det ∂f/∂z|` with `φ` taken from `params`.
    pub fn forward_on<'t>(&self, tape: &'t Tape, params: &Params<'_, 't>, z: Var<'t>) -> (Var<'t>, Var<'t>) {
        let mut x = z;
        let mut logdet: Option<Var<'t>> = None;
        for stage in &self.stages {
            let (y, ld) = self.apply_stage(tape, params, stage, x);
            x = y;
            if let Some(ld) = ld {
                logdet = Some(match logdet {
                    Some(acc) => acc + ld,
                    None => ld,
                });
            }
        }
        (x, logdet.unwrap_or_else(|| tape.scalar(0.0)))
    }

    fn apply_stage<'t>(&self, tape: &'t Tape, params: &Params<'_, 't>, stage: &Stage, x: Var<'t>) -> (Var<'t>, Option<Var<'t>>) {
        let d = self.dim();
        match stage {
            Stage::Scale(s) => (x.scale(*s), Some(tape.scalar(d as f64 * s.ln()))),
            Stage::Reverse => (x.reverse(), None),
            Stage::Diag { log_scale, shift } => {
                let log_s = params.vector(tape, *log_scale);
                let b = params.vector(tape, *shift);
                (log_s.exp() * x + b, Some(log_s.sum()))
            }
            Stage::Tril { log_diag, lower, shift, index } => {
                let log_d = params.vector(tape, *log_diag);
                let low = params.vector(tape, *lower);
                let b = params.vector(tape, *shift);
                let entries = tape.concat(&[log_d.exp(), low, tape.scalar(0.0)]);
                let l = entries.gather(Arc::clone(index));
                (l.matvec(d, d, x) + b, Some(log_d.sum()))
            }
            Stage::Iaf(layer) => {
                let (hidden, out) = layer.layers.split_at(layer.layers.len() - 1);
                let mut h = x;
                for &(w, b) in hidden {
                    h = (params.linear(tape, w, h) + params.vector(tape, b)).elu();
                }
                let (w, b) = out[0];
                let o = params.linear(tape, w, h) + params.vector(tape, b);
                let shift = o.slice(0, d);
                let log_scale = o.slice(d, d).clamp(-LOG_SCALE_BOUND, LOG_SCALE_BOUND);
                (x * log_scale.exp() + shift, Some(log_scale.sum()))
            }
        }
    }

    /// Evaluates `(f(z), log|det ∂f/∂z|)`.
    pub fn forward(&self, phi: &[f64], z: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        self.check_params(phi)?;
        if z.len() != self.dim() {
            return Err(FlowError::Dimension { expected: self.dim(), got: z.len() });
        }
        let tape = Tape::new();
        let params = Params::tracked(&tape, phi.to_vec(), self);
        let mut x = tape.constant(z.to_vec());
        let mut logdet = 0.0;
        for (i, stage) in self.stages.iter().enumerate() {
            let (y, ld) = self.apply_stage(&tape, &params, stage, x);
            let ld = ld.map(|v| v.item()).unwrap_or(0.0);
            if !ld.is_finite() || y.value().iter().any(|v| !v.is_finite()) {
                let flow = if let Stage::Iaf(l) = stage { Some(l.flow) } else { None };
                return Err(FlowError::NonFinite { stage: i, kind: stage.kind(), flow });
            }
            x = y;
            logdet += ld;
        }
        Ok((x.value(), logdet))
    }

    /// Snapshot of the map at fixed parameters.
    pub fn freeze(&self, phi: &[f64]) -> Result<FrozenMap, FlowError> {
        self.check_params(phi)?;
        let blocks = self
            .segments
            .iter()
            .map(|seg| {
                let mut data = phi[seg.offset..seg.offset + seg.len()].to_vec();
                if let Some(mask) = &seg.mask {
                    data.iter_mut().zip(mask.iter()).for_each(|(w, m)| *w *= m);
                }
                ConstMatrix::new(data, seg.rows, seg.cols)
            })
            .collect();
        Ok(FrozenMap { map: self.clone(), phi: phi.to_vec(), blocks })
    }
}

/// Where stage parameters come from when a map is recorded on a tape.
pub struct Params<'a, 't> {
    source: ParamSource<'a, 't>,
    slices: std::cell::RefCell<Vec<Option<Var<'t>>>>,
}

enum ParamSource<'a, 't> {
    Tracked { phi: Var<'t>, segments: &'a [Segment] },
    Frozen(&'a [ConstMatrix]),
}

impl<'a, 't> Params<'a, 't> {
    /// `φ` as a differentiable leaf on `tape`.
    pub fn tracked(tape: &'t Tape, phi: Vec<f64>, map: &'a TransportMap) -> Self {
        Self::from_var(tape.var(phi), map)
    }

    /// Uses an existing variable holding `φ`.
    pub fn from_var(phi: Var<'t>, map: &'a TransportMap) -> Self {
        assert_eq!(phi.len(), map.num_params, "parameter vector length");
        Params {
            source: ParamSource::Tracked { phi, segments: &map.segments },
            slices: std::cell::RefCell::new(vec![None; map.segments.len()]),
        }
    }

    pub fn phi(&self) -> Option<Var<'t>> {
        match &self.source {
            ParamSource::Tracked { phi, .. } => Some(*phi),
            ParamSource::Frozen(_) => None,
        }
    }

    /// Parameter block as a tape variable, sliced at most once per tape.
    fn block(&self, tape: &'t Tape, seg: usize) -> Var<'t> {
        if let Some(v) = self.slices.borrow()[seg] {
            return v;
        }
        let v = match &self.source {
            ParamSource::Tracked { phi, segments } => phi.slice(segments[seg].offset, segments[seg].len()),
            ParamSource::Frozen(blocks) => tape.constant(blocks[seg].data().to_vec()),
        };
        self.slices.borrow_mut()[seg] = Some(v);
        v
    }

    fn vector(&self, tape: &'t Tape, seg: usize) -> Var<'t> {
        self.block(tape, seg)
    }

    /// `W x` for weight block `seg`, masked if the block has a mask.
    fn linear(&self, tape: &'t Tape, seg: usize, x: Var<'t>) -> Var<'t> {
        match &self.source {
            ParamSource::Tracked { segments, .. } => {
                let s = &segments[seg];
                let w = self.block(tape, seg);
                match &s.mask {
                    Some(m) => w.masked_matvec(m, s.rows, s.cols, x),
                    None => w.matvec(s.rows, s.cols, x),
                }
            }
            // Frozen blocks are stored pre-masked.
            ParamSource::Frozen(blocks) => x.left_mul(&blocks[seg]),
        }
    }
}

/// A [`TransportMap`] with parameters baked into constants; recording it on a
/// tape differentiates only with respect to `z`.
#[derive(Clone, Debug)]
pub struct FrozenMap {
    map: TransportMap,
    phi: Vec<f64>,
    blocks: Vec<ConstMatrix>,
}

impl FrozenMap {
    pub fn map(&self) -> &TransportMap {
        &self.map
    }

    pub fn params(&self) -> &[f64] {
        &self.phi
    }

    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    pub fn forward_on<'t>(&self, tape: &'t Tape, z: Var<'t>) -> (Var<'t>, Var<'t>) {
        let params = Params { source: ParamSource::Frozen(&self.blocks), slices: std::cell::RefCell::new(vec![None; self.blocks.len()]) };
        self.map.forward_on(tape, &params, z)
    }

    pub fn forward(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let tape = Tape::new();
        let (theta, logdet) = self.forward_on(&tape, tape.constant(z.to_vec()));
        (theta.value(), logdet.item())
    }

    /// Jacobian `∂f/∂z` at `z`, row-major, by one reverse pass per output.
    pub fn jacobian(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let tape = Tape::new();
        let zv = tape.var(z.to_vec());
        let (theta, _) = self.forward_on(&tape, zv);
        let mut jac = Vec::with_capacity(d * d);
        for i in 0..d {
            let out = theta.slice(i, 1);
            jac.extend(tape.backward(out).wrt(zv));
        }
        jac
    }
}

/// On-disk form of a trained map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapCheckpoint {
    pub format_version: u32,
    pub spec: MapSpec,
    pub seed: u64,
    pub num_params: usize,
    pub params: Vec<f64>,
}

impl MapCheckpoint {
    pub fn new(map: &TransportMap, seed: u64, params: Vec<f64>) -> Self {
        MapCheckpoint { format_version: 1, spec: map.spec().clone(), seed, num_params: params.len(), params }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FlowError> {
        let ck: MapCheckpoint = serde_json::from_str(text)?;
        if ck.params.len() != ck.num_params {
            return Err(FlowError::ParamCount { expected: ck.num_params, got: ck.params.len() });
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FlowError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FlowError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rebuilds the map and checks the parameter count against it.
    pub fn into_map(self) -> Result<(TransportMap, Vec<f64>), FlowError> {
        let map = TransportMap::new(self.spec)?;
        map.check_params(&self.params)?;
        Ok((map, self.params))
    }
}
