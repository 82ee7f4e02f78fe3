//! Experiment configuration, the CLI entry points, evaluation reports,
//! plot-data emission, and the property-check suite.

pub mod checks;
pub mod eval;
pub mod plot;
pub mod run;

pub use eval::{evaluate, CellStats, EvalReport};
pub use plot::{emit_plot_data, plot_from_run_dirs};
pub use run::{cmd_ablate, cmd_check, cmd_describe, cmd_eval, cmd_train, AblationSummary};

use serde::{Deserialize, Serialize};

use crate::envs::{Env, EnvError, EnvSpec, GridConfig, Gridworld, SignalConfig, SignalGame, TaskEnv};
use crate::model::{MatNaht, ModelConfig, ModelError};
use crate::teammates::{build_pools, ParamDistribution, TeammatePool};
use crate::training::{AnyPolicy, BaselineConfig, BaselinePolicy, EvalSettings, PPOConfig, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MatNaht,
    MatNahtNoHistory,
    IndependentBaseline,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::MatNaht,
        Variant::MatNahtNoHistory,
        Variant::IndependentBaseline,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            Variant::MatNaht => "mat_naht",
            Variant::MatNahtNoHistory => "mat_naht_no_history",
            Variant::IndependentBaseline => "independent_baseline",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mat_naht" => Ok(Variant::MatNaht),
            "mat_naht_no_history" => Ok(Variant::MatNahtNoHistory),
            "independent_baseline" => Ok(Variant::IndependentBaseline),
            other => Err(format!(
                "unknown variant {other}; expected mat_naht | mat_naht_no_history | independent_baseline"
            )),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum EnvConfig {
    Signal(SignalConfig),
    Gridworld(GridConfig),
}

impl EnvConfig {
    pub fn build(&self) -> Result<TaskEnv, EnvError> {
        match self {
            EnvConfig::Signal(cfg) => Ok(TaskEnv::Signal(SignalGame::new(cfg.clone())?)),
            EnvConfig::Gridworld(cfg) => Ok(TaskEnv::Grid(Gridworld::new(cfg.clone())?)),
        }
    }
}

/// Architecture knobs; observation/action dims come from the env.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSection {
    pub k: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub baseline_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            k: 4,
            d_model: 64,
            n_heads: 2,
            n_layers_enc: 2,
            n_layers_dec: 2,
            baseline_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoolsSection {
    pub num_families: usize,
    pub train_per_family: usize,
    pub test_per_family: usize,
    pub seed: u64,
    pub eps_max: f64,
    pub permute_tiebreak: bool,
}

impl Default for PoolsSection {
    fn default() -> Self {
        PoolsSection {
            num_families: 5,
            train_per_family: 8,
            test_per_family: 4,
            seed: 0,
            eps_max: 0.03,
            permute_tiebreak: false,
        }
    }
}

impl PoolsSection {
    pub fn build(&self) -> (TeammatePool, TeammatePool) {
        build_pools(
            self.num_families,
            self.train_per_family,
            self.test_per_family,
            self.seed,
            &ParamDistribution {
                eps_max: self.eps_max,
                permute_tiebreak: self.permute_tiebreak,
            },
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub variant: Variant,
    pub output_dir: String,
    #[serde(default)]
    pub trajectory_dump: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub ppo: PPOConfig,
    #[serde(default)]
    pub pools: PoolsSection,
    #[serde(default)]
    pub eval: EvalSettings,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn from_toml(raw: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            toml::from_str(raw).map_err(|e| HarnessError::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, String), HarnessError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::BadConfig(format!("cannot read {}: {e}", path.display())))?;
        Ok((Self::from_toml(&raw)?, raw))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let env = self
            .env
            .build()
            .map_err(|e| HarnessError::BadConfig(e.to_string()))?;
        let spec = env.spec();
        if let EnvConfig::Signal(cfg) = &self.env {
            if self.pools.num_families > cfg.num_types {
                return Err(HarnessError::BadConfig(format!(
                    "signal task: num_families {} exceeds num_types {}",
                    self.pools.num_families, cfg.num_types
                )));
            }
        }
        if self.pools.num_families == 0
            || self.pools.train_per_family == 0
            || self.pools.test_per_family == 0
        {
            return Err(HarnessError::BadConfig(
                "pools need at least one family and one instance per split".into(),
            ));
        }
        if !(0.0..=0.1).contains(&self.pools.eps_max) {
            return Err(HarnessError::BadConfig(
                "eps_max must lie in [0, 0.1]".into(),
            ));
        }
        if self.run.seeds.is_empty() {
            return Err(HarnessError::BadConfig("need at least one seed".into()));
        }
        self.model_config(spec)
            .validate()
            .map_err(|e| HarnessError::BadConfig(e.to_string()))?;
        self.ppo
            .validate()
            .map_err(|e| HarnessError::BadConfig(e.to_string()))?;
        Ok(())
    }

    /// The transformer config for a given variant (the no-history
    /// ablation zeroes the window).
    pub fn model_config(&self, spec: &EnvSpec) -> ModelConfig {
        ModelConfig {
            obs_dim: spec.obs_dim,
            num_actions: spec.num_actions,
            k: self.model.k,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            n_layers_enc: self.model.n_layers_enc,
            n_layers_dec: self.model.n_layers_dec,
            max_agents: spec.num_agents - 1,
        }
    }

    pub fn build_policy(&self, variant: Variant, seed: u64) -> Result<AnyPolicy, ModelError> {
        let env = self.env.build().expect("validated env");
        let spec = env.spec();
        match variant {
            Variant::MatNaht => {
                let cfg = self.model_config(spec);
                Ok(AnyPolicy::Mat(MatNaht::new(cfg, seed)?))
            }
            Variant::MatNahtNoHistory => {
                let mut cfg = self.model_config(spec);
                cfg.k = 0;
                Ok(AnyPolicy::Mat(MatNaht::new(cfg, seed)?))
            }
            Variant::IndependentBaseline => Ok(AnyPolicy::Baseline(BaselinePolicy::new(
                BaselineConfig {
                    obs_dim: spec.obs_dim,
                    num_actions: spec.num_actions,
                    k: self.model.k,
                    hidden: self.model.baseline_hidden,
                    max_agents: spec.num_agents - 1,
                },
                seed,
            ))),
        }
    }
}

/// Rollout-worker cap from the environment (defaults to one worker).
pub fn worker_cap() -> usize {
    std::env::var("NAHT_MAT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(1)
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(String),

    #[error("inconsistent runs: {0}")]
    InconsistentRuns(String),

    #[error(transparent)]
    Train(#[from] TrainError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code per the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::BadConfig(_) => 2,
            HarnessError::MissingCheckpoint(_) => 3,
            _ => 1,
        }
    }
}
