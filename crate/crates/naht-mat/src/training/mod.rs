//! PPO with GAE on the joint value, over rollouts collected with
//! per-episode team compositions. Also hosts the independent-policy
//! baseline and the unified policy dispatch the trainer works against.

pub mod baseline;
pub mod gae;
pub mod ppo;
pub mod rollout;
pub mod trainer;

pub use baseline::{BaselineConfig, BaselinePolicy};
pub use gae::{compute_gae, gae_direct_sum};
pub use ppo::{minibatch_loss, ppo_update, ppo_update_at, LossReport, MinibatchLoss};
pub use rollout::{collect_rollouts, eval_rollouts, EvalSummary, RolloutBuffer};
pub use trainer::{train, EvalSettings, MetricsRecord, TrainOutcome};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::EnvError;
use crate::model::{DecodeResult, HistoryBuffer, MatNaht, ModelError};
use crate::numerics::{GradNode, NumericsError, ParamStore};
use crate::sampler::TeamComposition;
use crate::teammates::TeammateError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PPOConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    /// Minibatch size in whole episodes.
    pub minibatch_episodes: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    /// Episodes collected per iteration.
    pub rollout_episodes: usize,
    pub total_env_steps: usize,
    pub lr: f64,
    /// Linearly decay the learning rate to zero over the step budget.
    #[serde(default = "default_lr_anneal")]
    pub lr_anneal: bool,
}

fn default_lr_anneal() -> bool {
    true
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch_episodes: 8,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            rollout_episodes: 32,
            total_env_steps: 100_000,
            lr: 3e-4,
            lr_anneal: true,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.gamma) || !unit(self.gae_lambda) {
            return Err(TrainError::BadConfig(
                "gamma and gae_lambda must lie in [0, 1]".into(),
            ));
        }
        if self.clip <= 0.0 {
            return Err(TrainError::BadConfig("clip must be positive".into()));
        }
        if self.epochs == 0 || self.minibatch_episodes == 0 || self.rollout_episodes == 0 {
            return Err(TrainError::BadConfig(
                "epochs, minibatch_episodes, rollout_episodes must be positive".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(TrainError::BadConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

/// One episode of controlled-agent experience. Uncontrolled agents'
/// observations and actions never enter the buffer; their influence is
/// only whatever reached the controlled agents' own observations.
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub composition: TeamComposition,
    /// Controlled observations per step, `[T+1][N][obs_dim]` (index 0 is
    /// the reset observation).
    pub obs: Vec<Vec<Vec<f64>>>,
    /// Controlled actions per step, `[T][N]`.
    pub actions: Vec<Vec<usize>>,
    /// Behavior log-probs at collection time, `[T][N]`.
    pub log_probs: Vec<Vec<f64>>,
    /// Joint value estimates, `[T]`.
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Normalized advantages, filled by `compute_gae`.
    pub advantages: Vec<f64>,
    /// Value targets, filled by `compute_gae`.
    pub value_targets: Vec<f64>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// The trainable policies: the transformer and the independent baseline.
pub enum AnyPolicy {
    Mat(MatNaht),
    Baseline(BaselinePolicy),
}

impl AnyPolicy {
    pub fn history_window(&self) -> usize {
        match self {
            AnyPolicy::Mat(m) => m.cfg.k,
            AnyPolicy::Baseline(b) => b.cfg.k,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            AnyPolicy::Mat(m) => m.cfg.obs_dim,
            AnyPolicy::Baseline(b) => b.cfg.obs_dim,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            AnyPolicy::Mat(m) => m.cfg.num_actions,
            AnyPolicy::Baseline(b) => b.cfg.num_actions,
        }
    }

    /// Act for every controlled agent; returns the decode result and the
    /// joint value estimate.
    pub fn act(
        &self,
        hist: &HistoryBuffer,
        sample: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(DecodeResult, f64), ModelError> {
        match self {
            AnyPolicy::Mat(m) => {
                let enc = m.encode(&m.build_tokens(hist)?)?;
                let value = enc.value();
                let decoded = if sample {
                    m.decode_autoregressive(&enc, rng)?
                } else {
                    m.decode_greedy(&enc)?
                };
                Ok((decoded, value))
            }
            AnyPolicy::Baseline(b) => b.act(hist, sample, rng),
        }
    }

    /// Teacher-forced training pass: per-agent log-probs `[N]`, per-agent
    /// entropies `[N]`, and the joint value `[1,1]`, as graph nodes.
    pub fn evaluate_actions(
        &self,
        hist: &HistoryBuffer,
        actions: &[usize],
    ) -> Result<(GradNode, GradNode, GradNode), ModelError> {
        match self {
            AnyPolicy::Mat(m) => {
                let enc = m.encode(&m.build_tokens(hist)?)?;
                let (logps, ents) = m.decode_teacher_forced(&enc, actions)?;
                Ok((logps, ents, enc.joint_value))
            }
            AnyPolicy::Baseline(b) => b.evaluate_actions(hist, actions),
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            AnyPolicy::Mat(m) => m.store(),
            AnyPolicy::Baseline(b) => b.store(),
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyPolicy::Mat(m) => m.store_mut(),
            AnyPolicy::Baseline(b) => b.store_mut(),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            AnyPolicy::Mat(m) => m.describe(),
            AnyPolicy::Baseline(b) => b.describe(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),

    #[error("non-finite loss (policy {policy}, value {value}, entropy {entropy}); diagnostic: {diagnostic}")]
    NonFiniteLoss {
        policy: f64,
        value: f64,
        entropy: f64,
        diagnostic: String,
    },

    #[error(transparent)]
    Env(#[from] EnvError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Teammate(#[from] TeammateError),

    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
