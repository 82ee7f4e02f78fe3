//! Dec-POMDP environment abstraction and the two toy cooperative tasks.
//!
//! Both tasks are deterministic given (reset context, action sequence),
//! embed the timestep in every observation, and expose exact oracle
//! support (cloneable state, state keys, return bounds).

pub mod gridworld;
pub mod oracle;
pub mod signal;

pub use gridworld::{GridConfig, Gridworld};
pub use oracle::{oracle_memoryless_return, oracle_optimal_return, OracleError, BRANCH_CAP};
pub use signal::{SignalConfig, SignalGame};

use serde::{Deserialize, Serialize};

/// Static description of a task: ⟨M, obs dim, |A|, horizon, γ⟩.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub num_agents: usize,
    pub obs_dim: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub gamma: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.num_agents < 2 {
            return Err(EnvError::BadConfig("need at least 2 agents".into()));
        }
        if self.num_actions < 2 {
            return Err(EnvError::BadConfig("need at least 2 actions".into()));
        }
        if self.horizon < 1 {
            return Err(EnvError::BadConfig("horizon must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(EnvError::BadConfig("gamma must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One agent's local view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Stable bit-level key (observations are compared exactly).
    pub fn bits(&self) -> Vec<u64> {
        self.0.iter().map(|v| v.to_bits()).collect()
    }
}

/// Everything the environment needs to start an episode: the seed, which
/// slots the learner controls, and the teammate family driving the rest.
/// The reward of the signal task references the controlled set, so the
/// composition is part of the episode state.
#[derive(Clone, Debug)]
pub struct EpisodeContext {
    pub seed: u64,
    pub controlled_slots: Vec<usize>,
    pub teammate_family: usize,
}

/// Result of one environment step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    pub reward: f64,
    pub done: bool,
    /// Opaque global-state snapshot for debugging and trajectory dumps.
    pub state: serde_json::Value,
}

pub trait Env {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, ctx: &EpisodeContext) -> Vec<Observation>;
    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult, EnvError>;
    fn state_snapshot(&self) -> serde_json::Value;
}

/// Concrete task dispatch. Cloneable so oracles can branch world lines.
#[derive(Clone, Debug)]
pub enum TaskEnv {
    Signal(SignalGame),
    Grid(Gridworld),
}

impl TaskEnv {
    /// Layout information teammate behaviors need to read observations.
    pub fn layout(&self) -> crate::teammates::TaskLayout {
        match self {
            TaskEnv::Signal(e) => e.layout(),
            TaskEnv::Grid(e) => e.layout(),
        }
    }

    /// Exact fingerprint of the global state, including the timestep.
    pub fn state_key(&self) -> Vec<u64> {
        match self {
            TaskEnv::Signal(e) => e.state_key(),
            TaskEnv::Grid(e) => e.state_key(),
        }
    }

    /// Upper bound on the return still collectable from this state.
    pub fn max_remaining_return(&self) -> f64 {
        match self {
            TaskEnv::Signal(e) => e.max_remaining_return(),
            TaskEnv::Grid(e) => e.max_remaining_return(),
        }
    }

    pub fn is_done(&self) -> bool {
        match self {
            TaskEnv::Signal(e) => e.is_done(),
            TaskEnv::Grid(e) => e.is_done(),
        }
    }

    pub fn time(&self) -> usize {
        match self {
            TaskEnv::Signal(e) => e.time(),
            TaskEnv::Grid(e) => e.time(),
        }
    }

    pub fn observations(&self) -> Vec<Observation> {
        match self {
            TaskEnv::Signal(e) => e.observations(),
            TaskEnv::Grid(e) => e.observations(),
        }
    }
}

impl Env for TaskEnv {
    fn spec(&self) -> &EnvSpec {
        match self {
            TaskEnv::Signal(e) => e.spec(),
            TaskEnv::Grid(e) => e.spec(),
        }
    }

    fn reset(&mut self, ctx: &EpisodeContext) -> Vec<Observation> {
        match self {
            TaskEnv::Signal(e) => e.reset(ctx),
            TaskEnv::Grid(e) => e.reset(ctx),
        }
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult, EnvError> {
        match self {
            TaskEnv::Signal(e) => e.step(joint_action),
            TaskEnv::Grid(e) => e.step(joint_action),
        }
    }

    fn state_snapshot(&self) -> serde_json::Value {
        match self {
            TaskEnv::Signal(e) => e.state_snapshot(),
            TaskEnv::Grid(e) => e.state_snapshot(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("action {action} out of range [0, {num_actions}) for slot {slot}")]
    ActionOutOfRange {
        slot: usize,
        action: usize,
        num_actions: usize,
    },

    #[error("step called after episode finished")]
    EpisodeDone,

    #[error("joint action has {got} entries, environment has {expected} agents")]
    WrongJointLength { got: usize, expected: usize },

    #[error("invalid environment config: {0}")]
    BadConfig(String),
}

pub(crate) fn validate_joint_action(
    joint: &[usize],
    num_agents: usize,
    num_actions: usize,
    done: bool,
) -> Result<(), EnvError> {
    if done {
        return Err(EnvError::EpisodeDone);
    }
    if joint.len() != num_agents {
        return Err(EnvError::WrongJointLength {
            got: joint.len(),
            expected: num_agents,
        });
    }
    for (slot, &action) in joint.iter().enumerate() {
        if action >= num_actions {
            return Err(EnvError::ActionOutOfRange {
                slot,
                action,
                num_actions,
            });
        }
    }
    Ok(())
}

/// Normalized timestep feature: distinct for every t in [0, T).
pub(crate) fn time_feature(t: usize, horizon: usize) -> f64 {
    t as f64 / horizon.max(2).saturating_sub(1) as f64
}
