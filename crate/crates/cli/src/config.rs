use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use transport_hmc::flows::{IafStackConfig, TransportMap};
use transport_hmc::targets::{load_german_credit, Funnel, IllConditionedGaussian, SparseLogisticRegression, Target};
use transport_hmc::tuner::TunerConfig;
use transport_hmc::vi::TrainConfig;

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSection {
    /// `gaussian`, `funnel` or `logistic`.
    pub name: String,
    pub dim: usize,
    /// Seed of the quenched covariance of the Gaussian target.
    pub seed: u64,
    pub data_path: PathBuf,
}

impl Default for TargetSection {
    fn default() -> Self {
        TargetSection { name: "funnel".into(), dim: 100, seed: 0, data_path: PathBuf::from("german.data-numeric") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    /// `identity`, `diag`, `tril`, `iaf` or `iafN` (N flows).
    pub kind: String,
    pub num_flows: usize,
    pub hidden_layers: usize,
    /// 0 means "target dimension".
    pub hidden_dim: usize,
    pub base_scale: f64,
    pub seed: u64,
}

impl Default for MapSection {
    fn default() -> Self {
        MapSection { kind: "iaf".into(), num_flows: 3, hidden_layers: 2, hidden_dim: 0, base_scale: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_decay_steps: Option<Vec<usize>>,
    pub lr_decay_factor: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcSection {
    /// Both unset means "tune first".
    pub step_size: Option<f64>,
    pub num_leapfrog: Option<usize>,
    pub num_chains: Option<usize>,
    pub num_steps: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerSection {
    pub budget: Option<usize>,
    pub pilot_chains: Option<usize>,
    pub pilot_steps: Option<usize>,
    pub max_pilot_grads: Option<u64>,
    pub refine: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub maps: Vec<String>,
    /// Training steps between bias estimates.
    pub train_every: usize,
    /// HMC transitions between bias estimates.
    pub sample_every: usize,
    /// Chains and transitions of the reference run used when a target has no
    /// analytic moments.
    pub reference_chains: usize,
    pub reference_steps: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        BenchmarkSection {
            maps: vec!["diag".into(), "tril".into(), "iaf3".into()],
            train_every: 50,
            sample_every: 25,
            reference_chains: 64,
            reference_steps: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySection {
    pub step_size: f64,
    pub num_leapfrog: usize,
    /// Starting z; drawn from N(0, I) when empty.
    pub start: Vec<f64>,
    /// Initial momentum; drawn from N(0, I) when empty.
    pub momentum: Vec<f64>,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        TrajectorySection { step_size: 0.1, num_leapfrog: 30, start: Vec::new(), momentum: Vec::new() }
    }
}

/// Everything a run depends on. A run is reproducible from this alone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out: PathBuf,
    pub target: TargetSection,
    pub map: MapSection,
    pub train: TrainSection,
    pub hmc: HmcSection,
    pub tuner: TunerSection,
    pub benchmark: BenchmarkSection,
    pub trajectory: TrajectorySection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        let base = match self.profile {
            Profile::Desk => TrainConfig::desk(),
            Profile::Paper => TrainConfig::paper(),
        };
        let t = &self.train;
        TrainConfig {
            steps: t.steps.unwrap_or(base.steps),
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            lr: t.lr.unwrap_or(base.lr),
            lr_decay_steps: t.lr_decay_steps.clone().unwrap_or(base.lr_decay_steps),
            lr_decay_factor: t.lr_decay_factor.unwrap_or(base.lr_decay_factor),
            seed: self.seed,
        }
    }

    pub fn num_chains(&self) -> usize {
        self.hmc.num_chains.unwrap_or(match self.profile {
            Profile::Desk => 256,
            Profile::Paper => 16384,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.hmc.num_steps.unwrap_or(1000)
    }

    pub fn tuner_config(&self) -> TunerConfig {
        let t = &self.tuner;
        let base = TunerConfig::default();
        let pilot_chains = t.pilot_chains.unwrap_or(base.pilot_chains);
        let pilot_steps = t.pilot_steps.unwrap_or(base.pilot_steps);
        // At desk scale, pilots with long trajectories are shortened to the
        // cost of a 10-leapfrog-step pilot.
        let default_cap = match self.profile {
            Profile::Desk => Some((pilot_chains * pilot_steps * 10) as u64),
            Profile::Paper => None,
        };
        TunerConfig {
            budget: t.budget.unwrap_or(base.budget),
            pilot_chains,
            pilot_steps,
            max_pilot_grads: t.max_pilot_grads.or(default_cap),
            refine: t.refine.unwrap_or(false),
            seed: self.seed,
            ..base
        }
    }

    pub fn build_target(&self) -> Result<Box<dyn Target>, CliError> {
        let t = &self.target;
        let dim_err = |e: transport_hmc::targets::TargetError| CliError::Usage(e.to_string());
        Ok(match t.name.as_str() {
            "gaussian" => Box::new(IllConditionedGaussian::new(t.seed, t.dim).map_err(dim_err)?),
            "funnel" => Box::new(Funnel::new(t.dim).map_err(dim_err)?),
            "logistic" => {
                if !t.data_path.exists() {
                    return Err(CliError::Usage(format!("data file not found: {}", t.data_path.display())));
                }
                let data = load_german_credit(&t.data_path).map_err(|e| CliError::Usage(e.to_string()))?;
                Box::new(SparseLogisticRegression::new(data))
            }
            other => return Err(CliError::Usage(format!("unknown target '{other}' (expected gaussian, funnel or logistic)"))),
        })
    }

    /// Builds the map named `kind` with this config's architecture settings.
    pub fn build_map(&self, kind: &str, dim: usize) -> Result<TransportMap, CliError> {
        let m = &self.map;
        let map = match kind {
            "identity" => TransportMap::identity(dim),
            "diag" => TransportMap::diag(dim),
            "tril" => TransportMap::tril(dim),
            k if k.starts_with("iaf") => {
                let num_flows = match &k[3..] {
                    "" => m.num_flows,
                    n => n.parse().map_err(|_| CliError::Usage(format!("bad map kind '{k}'")))?,
                };
                if num_flows == 0 {
                    return Err(CliError::Usage("iaf needs at least one flow".into()));
                }
                let cfg = IafStackConfig {
                    num_flows,
                    hidden_layers: m.hidden_layers,
                    hidden_dim: (m.hidden_dim > 0).then_some(m.hidden_dim),
                    ..IafStackConfig::default()
                };
                TransportMap::iaf(dim, cfg)
            }
            other => return Err(CliError::Usage(format!("unknown map '{other}' (expected identity, diag, tril or iafN)"))),
        };
        Ok(if m.base_scale != 1.0 { map.with_base_scale(m.base_scale) } else { map })
    }
}
