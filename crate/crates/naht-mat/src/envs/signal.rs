//! Task A — the signal game.
//!
//! Teammates of family τ play the code τ at t=0 and noop afterwards, so
//! every family behaves identically from t=1 on; the code survives only
//! in the t=1 previous-action features. The shared reward arrives at the
//! final step when every controlled agent outputs τ.
//!
//! Additionally, controlled agents must stay on noop at the quiet step
//! t = T−2. Previous actions of *all* agents are observable, so without
//! the quiet step a policy could relay the code through its own actions
//! and solve the task with no memory at all; the quiet step cuts that
//! relay chain one step before the decision, which is exactly what makes
//! the history window necessary (k ≥ T−2) and caps memoryless play at
//! 1/num_types.

use serde::{Deserialize, Serialize};

use crate::envs::{
    time_feature, validate_joint_action, Env, EnvError, EnvSpec, EpisodeContext, Observation,
    StepResult,
};
use crate::teammates::TaskLayout;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SignalConfig {
    pub num_agents: usize,
    pub num_types: usize,
    pub horizon: usize,
    pub gamma: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            num_agents: 3,
            num_types: 5,
            horizon: 4,
            gamma: 0.99,
        }
    }
}

impl SignalConfig {
    pub fn num_actions(&self) -> usize {
        self.num_types + 1
    }

    /// Index of the noop action.
    pub fn noop(&self) -> usize {
        self.num_types
    }

    pub fn obs_dim(&self) -> usize {
        self.num_agents * self.num_actions() + 1
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            num_agents: self.num_agents,
            obs_dim: self.obs_dim(),
            num_actions: self.num_actions(),
            horizon: self.horizon,
            gamma: self.gamma,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SignalGame {
    cfg: SignalConfig,
    spec: EnvSpec,
    t: usize,
    done: bool,
    spoiled: bool,
    last_actions: Vec<Option<usize>>,
    controlled: Vec<usize>,
    family: usize,
}

impl SignalGame {
    pub fn new(cfg: SignalConfig) -> Result<Self, EnvError> {
        let spec = cfg.spec();
        spec.validate()?;
        if cfg.num_types < 1 {
            return Err(EnvError::BadConfig("need at least one type".into()));
        }
        let m = cfg.num_agents;
        Ok(SignalGame {
            cfg,
            spec,
            t: 0,
            done: true,
            spoiled: false,
            last_actions: vec![None; m],
            controlled: Vec::new(),
            family: 0,
        })
    }

    pub fn config(&self) -> &SignalConfig {
        &self.cfg
    }

    pub fn layout(&self) -> TaskLayout {
        TaskLayout::Signal {
            num_types: self.cfg.num_types,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn time(&self) -> usize {
        self.t
    }

    fn observe(&self, slot: usize) -> Observation {
        let a = self.cfg.num_actions();
        let mut v = vec![0.0; self.spec.obs_dim];
        let write_onehot = |seg: usize, action: Option<usize>, v: &mut Vec<f64>| {
            if let Some(act) = action {
                v[seg * a + act] = 1.0;
            }
        };
        // Own previous action first, then the other slots in ascending order.
        write_onehot(0, self.last_actions[slot], &mut v);
        let mut seg = 1;
        for j in 0..self.cfg.num_agents {
            if j == slot {
                continue;
            }
            write_onehot(seg, self.last_actions[j], &mut v);
            seg += 1;
        }
        v[self.spec.obs_dim - 1] = time_feature(self.t, self.cfg.horizon);
        Observation(v)
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.cfg.num_agents).map(|i| self.observe(i)).collect()
    }

    pub fn state_key(&self) -> Vec<u64> {
        let mut key = vec![self.t as u64, self.done as u64, self.spoiled as u64];
        for la in &self.last_actions {
            key.push(la.map_or(u64::MAX, |a| a as u64));
        }
        key
    }

    pub fn max_remaining_return(&self) -> f64 {
        if self.done || self.spoiled {
            0.0
        } else {
            1.0
        }
    }
}

impl Env for SignalGame {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, ctx: &EpisodeContext) -> Vec<Observation> {
        self.t = 0;
        self.done = false;
        self.spoiled = false;
        self.last_actions = vec![None; self.cfg.num_agents];
        self.controlled = ctx.controlled_slots.clone();
        self.family = ctx.teammate_family;
        self.observations()
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult, EnvError> {
        validate_joint_action(
            joint_action,
            self.cfg.num_agents,
            self.cfg.num_actions(),
            self.done,
        )?;
        let t = self.t;
        let horizon = self.cfg.horizon;

        // Quiet step: any controlled non-noop at t = T-2 voids the reward.
        if horizon >= 2 && t == horizon - 2 {
            let noop = self.cfg.noop();
            if self.controlled.iter().any(|&s| joint_action[s] != noop) {
                self.spoiled = true;
            }
        }

        let mut reward = 0.0;
        if t == horizon - 1 {
            let target = self.family;
            let matched = self.controlled.iter().all(|&s| joint_action[s] == target);
            if matched && !self.spoiled {
                reward = 1.0;
            }
            self.done = true;
        }

        self.last_actions = joint_action.iter().map(|&a| Some(a)).collect();
        self.t += 1;

        Ok(StepResult {
            observations: self.observations(),
            reward,
            done: self.done,
            state: self.state_snapshot(),
        })
    }

    fn state_snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "t": self.t,
            "spoiled": self.spoiled,
            "family": self.family,
            "last_actions": self.last_actions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(controlled: &[usize], family: usize) -> EpisodeContext {
        EpisodeContext {
            seed: 0,
            controlled_slots: controlled.to_vec(),
            teammate_family: family,
        }
    }

    fn default_game() -> SignalGame {
        SignalGame::new(SignalConfig::default()).unwrap()
    }

    #[test]
    fn reset_has_empty_action_history() {
        let mut env = default_game();
        let obs = env.reset(&ctx(&[0, 1], 2));
        for o in &obs {
            // All one-hot segments zero; only the timestep feature may differ.
            assert!(o.as_slice()[..o.len() - 1].iter().all(|&v| v == 0.0));
            assert_eq!(o.as_slice()[o.len() - 1], 0.0);
        }
    }

    #[test]
    fn same_reset_is_bit_identical() {
        let mut a = default_game();
        let mut b = default_game();
        let oa = a.reset(&ctx(&[1], 3));
        let ob = b.reset(&ctx(&[1], 3));
        assert_eq!(oa, ob);
    }

    #[test]
    fn reward_zero_before_final_step() {
        let mut env = default_game();
        env.reset(&ctx(&[0, 1], 2));
        let noop = env.config().noop();
        for _ in 0..env.config().horizon - 1 {
            let r = env.step(&vec![noop; 3]).unwrap();
            assert_eq!(r.reward, 0.0);
            assert!(!r.done);
        }
    }

    #[test]
    fn matching_final_actions_earn_reward() {
        let mut env = default_game();
        env.reset(&ctx(&[0, 1], 2));
        let noop = env.config().noop();
        env.step(&[noop, noop, 2]).unwrap(); // t=0: teammate signals
        env.step(&[noop, noop, noop]).unwrap(); // t=1
        env.step(&[noop, noop, noop]).unwrap(); // t=2 quiet step
        let r = env.step(&[2, 2, noop]).unwrap(); // t=3: both controlled play the code
        assert_eq!(r.reward, 1.0);
        assert!(r.done);
    }

    #[test]
    fn wrong_code_earns_nothing() {
        let mut env = default_game();
        env.reset(&ctx(&[0, 1], 2));
        let noop = env.config().noop();
        env.step(&[noop, noop, 2]).unwrap();
        env.step(&[noop, noop, noop]).unwrap();
        env.step(&[noop, noop, noop]).unwrap();
        let r = env.step(&[2, 3, noop]).unwrap();
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn quiet_step_violation_voids_reward() {
        let mut env = default_game();
        env.reset(&ctx(&[0, 1], 2));
        let noop = env.config().noop();
        env.step(&[noop, noop, 2]).unwrap();
        env.step(&[noop, noop, noop]).unwrap();
        env.step(&[2, noop, noop]).unwrap(); // controlled slot 0 talks at t = T-2
        let r = env.step(&[2, 2, noop]).unwrap();
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn previous_actions_visible_next_step() {
        let mut env = default_game();
        env.reset(&ctx(&[0], 4));
        let a = env.config().num_actions();
        let r = env.step(&[1, 4, 4]).unwrap();
        // Slot 0 sees its own action (segment 0) then slots 1, 2.
        let o = &r.observations[0];
        assert_eq!(o.as_slice()[1], 1.0);
        assert_eq!(o.as_slice()[a + 4], 1.0);
        assert_eq!(o.as_slice()[2 * a + 4], 1.0);
        // Slot 1 sees its own action first, then slots 0 and 2.
        let o = &r.observations[1];
        assert_eq!(o.as_slice()[4], 1.0);
        assert_eq!(o.as_slice()[a + 1], 1.0);
        assert_eq!(o.as_slice()[2 * a + 4], 1.0);
    }

    #[test]
    fn step_after_done_is_error() {
        let mut env = default_game();
        env.reset(&ctx(&[0], 0));
        for _ in 0..4 {
            env.step(&[5, 5, 5]).unwrap();
        }
        assert!(matches!(env.step(&[5, 5, 5]), Err(EnvError::EpisodeDone)));
    }

    #[test]
    fn out_of_range_action_is_error() {
        let mut env = default_game();
        env.reset(&ctx(&[0], 0));
        assert!(matches!(
            env.step(&[6, 0, 0]),
            Err(EnvError::ActionOutOfRange { slot: 0, .. })
        ));
    }

    #[test]
    fn returns_are_zero_or_one() {
        // Random play over many episodes never leaves {0, 1}.
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(11, "signal-returns", 0);
        for ep in 0..200 {
            let mut env = default_game();
            env.reset(&ctx(&[ep % 3], rng.gen_range(0..5)));
            let mut total = 0.0;
            loop {
                let joint: Vec<usize> = (0..3).map(|_| rng.gen_range(0..6)).collect();
                let r = env.step(&joint).unwrap();
                total += r.reward;
                if r.done {
                    break;
                }
            }
            assert!(total == 0.0 || total == 1.0);
        }
    }
}
