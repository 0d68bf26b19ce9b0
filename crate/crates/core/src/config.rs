//! Versioned JSON run configuration shared by every subcommand.
//!
//! Every section except `version` and `seed` may be omitted and takes its
//! defaults. Unknown fields are rejected. The seed drives the training and
//! evaluation data, the gate initialisation and the shuffling; the backbone
//! itself is fixed by `wiring.seed`.
//!
//! ```json
//! {
//!   "version": 1,
//!   "seed": 0,
//!   "task": "needle",
//!   "out_dir": "out",
//!   "needle": { "context_len": 128, "pairs": 6, "queries": 2, "fillers": 24 },
//!   "wiring": { "retrieve_gain": 14.0 },
//!   "gates": { "tied": true, "input": "embedding" },
//!   "train": { "steps": 400, "lr": 0.005, "lambda": 0.0001, "budget": { "global": 32.0 } },
//!   "eviction": { "horizon": { "steps": 2 } },
//!   "data": { "train_samples": 64, "eval_samples": 300 },
//!   "eval": { "budgets": [64, 128], "policies": ["full_cache", "global", "per_head", "recency"] },
//!   "theory": { "instances": 1000 },
//!   "survival": { "top_k": [1, 2, 4, 8], "mass": [0.99] }
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eviction::{EvictionConfig, Policy};
use crate::gates::{GateInit, GateInput};
use crate::model::ModelShape;
use crate::needle::{TaskSpec, Wiring};
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    /// Multi-key needle retrieval over the hand-wired backbone.
    #[default]
    Needle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub tied: bool,
    pub input: GateInput,
    pub init: GateInit,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            tied: true,
            input: GateInput::Embedding,
            init: GateInit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 64,
            eval_samples: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Total entry budgets across all layers and heads.
    pub budgets: Vec<usize>,
    pub policies: Vec<Policy>,
    pub page_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            budgets: vec![64, 128],
            policies: vec![Policy::FullCache, Policy::Global, Policy::PerHead, Policy::Recency],
            page_size: crate::paged_cache::DEFAULT_PAGE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Randomised instances for each of the two dilution checks.
    pub instances: usize,
    /// Largest instance size for the retention identity.
    pub max_tokens: usize,
    /// Distractor counts for the dilution sweep with two useful tokens.
    pub sweep: Vec<usize>,
    pub sweep_margin: f64,
    pub persistence_configs: usize,
    pub n_max: usize,
    pub trials: usize,
    pub exit_states: usize,
    pub exit_rollouts: usize,
    /// Forces every persistence chain to this spectral radius.
    pub persistence_radius: Option<f64>,
    pub var_radius: f64,
    pub var_dim: usize,
    pub var_fits: usize,
    pub var_trajectories: usize,
    pub var_steps: usize,
    /// Allowed gap between the median fitted radius and `var_radius`.
    pub var_tolerance: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            instances: 1000,
            max_tokens: 64,
            sweep: vec![10, 100, 1000, 10_000],
            sweep_margin: 1.0,
            persistence_configs: 10,
            n_max: 200,
            trials: 4000,
            exit_states: 1000,
            exit_rollouts: 1000,
            persistence_radius: None,
            var_radius: 0.7,
            var_dim: 4,
            var_fits: 5,
            var_trajectories: 10,
            var_steps: 500,
            var_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalConfig {
    /// Full-cache decodes pooled into the curves.
    pub samples: usize,
    pub top_k: Vec<usize>,
    pub mass: Vec<f64>,
    pub horizons: Vec<usize>,
}

impl Default for SurvivalConfig {
    fn default() -> Self {
        Self {
            samples: 20,
            top_k: vec![1, 2, 4, 8],
            mass: vec![0.99],
            horizons: vec![1, 2, 4, 8, 16, 32, 64],
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default)]
    pub task: TaskId,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub needle: TaskSpec,
    #[serde(default)]
    pub wiring: Wiring,
    #[serde(default)]
    pub gates: GateConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// `m_global` is ignored here; evaluation sets it per budget.
    #[serde(default)]
    pub eviction: EvictionConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
    #[serde(default)]
    pub survival: SurvivalConfig,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            version: SCHEMA_VERSION,
            seed,
            task: TaskId::default(),
            out_dir: default_out_dir(),
            needle: TaskSpec::default(),
            wiring: Wiring::default(),
            gates: GateConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eviction: EvictionConfig::default(),
            eval: EvalConfig::default(),
            theory: TheoryConfig::default(),
            survival: SurvivalConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn shape(&self) -> ModelShape {
        self.wiring.shape(&self.needle)
    }

    /// Training settings with the shuffling seed taken from the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    /// Seed for one named stream of the run, so changing the number of
    /// training samples leaves the evaluation set alone and vice versa.
    pub fn stream_seed(&self, stream: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported config version {} (expected {SCHEMA_VERSION})", self.version)));
        }
        self.needle.validate()?;
        self.shape().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        EvictionConfig {
            m_global: 1,
            ..self.eviction.clone()
        }
        .validate()?;
        if self.data.train_samples == 0 || self.data.eval_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.eval.budgets.contains(&0) || self.eval.page_size == 0 {
            return Err(Error::Config("budgets and page size must be positive".into()));
        }
        let t = &self.theory;
        if t.max_tokens < 2 || t.n_max == 0 || t.trials == 0 || t.exit_states == 0 || t.exit_rollouts == 0 {
            return Err(Error::Config("theory sizes must be positive (max_tokens at least 2)".into()));
        }
        if t.var_dim == 0 || t.var_steps <= t.var_dim + 1 || t.var_fits == 0 || t.var_trajectories == 0 {
            return Err(Error::Config("VAR fit needs a positive dimension and more steps than dimensions".into()));
        }
        if !(t.sweep_margin >= 0.0) || !(t.var_radius >= 0.0) || t.persistence_radius.is_some_and(|r| !(r >= 0.0)) {
            return Err(Error::Config("margins and radii must be non-negative".into()));
        }
        let s = &self.survival;
        if s.samples == 0 || s.top_k.contains(&0) || s.mass.iter().any(|m| !(*m > 0.0 && *m <= 1.0)) {
            return Err(Error::Config("survival needs samples, K >= 1 and mass thresholds in (0, 1]".into()));
        }
        Ok(())
    }
}
