//! Scripted uncontrolled-teammate families, instances, and train/test
//! pools.
//!
//! A family is a behavior type τ; an instance is a concrete parameter
//! draw (noise level, tie-break ordering) plus a seed. Train and test
//! pools are disjoint instance sets drawn from the same distribution, so
//! generalization is measured across genuinely unseen teammates of known
//! families.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::gridworld::{apply_move, MOVE_DOWN, MOVE_LEFT, MOVE_RIGHT, MOVE_STAY, MOVE_UP, NUM_MOVES};
use crate::envs::Observation;
use crate::rng::derive_rng;

/// What a behavior needs to know to read an observation vector.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskLayout {
    Signal {
        num_types: usize,
    },
    Grid {
        num_agents: usize,
        width: usize,
        height: usize,
        num_goals: usize,
    },
}

/// Concrete parameter draw for one teammate instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceParams {
    /// Probability of replacing the scripted action with a uniform one.
    pub epsilon: f64,
    /// Move-priority permutation used for gridworld tie-breaking.
    pub tiebreak: Vec<usize>,
}

impl InstanceParams {
    pub fn canonical() -> Self {
        InstanceParams {
            epsilon: 0.0,
            tiebreak: vec![MOVE_UP, MOVE_DOWN, MOVE_LEFT, MOVE_RIGHT, MOVE_STAY],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeammateInstance {
    pub family_id: usize,
    pub params: InstanceParams,
    pub instance_seed: u64,
}

impl TeammateInstance {
    /// Noise-free instance with the default tie-break order; the oracle
    /// behavior of a family.
    pub fn canonical(family_id: usize) -> Self {
        TeammateInstance {
            family_id,
            params: InstanceParams::canonical(),
            instance_seed: 0,
        }
    }

    /// The scripted action for this teammate at its current observation.
    ///
    /// With probability `epsilon` the action is replaced by a uniform
    /// draw; noise-free instances never touch the RNG, so oracles can run
    /// them without one.
    pub fn act(
        &self,
        layout: &TaskLayout,
        obs: &Observation,
        t: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize, TeammateError> {
        let (expected_dim, num_actions) = match layout {
            TaskLayout::Signal { num_types } => {
                // own one-hot + others' one-hots + timestep; M is implied
                // by the observation itself.
                let a = num_types + 1;
                if (obs.len() - 1) % a != 0 || obs.len() < a + 1 {
                    return Err(TeammateError::ObsDimMismatch {
                        got: obs.len(),
                        expected: a + 1,
                    });
                }
                (obs.len(), a)
            }
            TaskLayout::Grid {
                num_agents,
                num_goals,
                ..
            } => {
                let dim = 2 + (num_agents - 1) * (2 + NUM_MOVES) + num_goals * 2 + 1;
                (dim, NUM_MOVES)
            }
        };
        if obs.len() != expected_dim {
            return Err(TeammateError::ObsDimMismatch {
                got: obs.len(),
                expected: expected_dim,
            });
        }

        if self.params.epsilon > 0.0 && rng.gen::<f64>() < self.params.epsilon {
            return Ok(rng.gen_range(0..num_actions));
        }

        Ok(match layout {
            TaskLayout::Signal { num_types } => {
                if t == 0 {
                    self.family_id % num_types
                } else {
                    *num_types // noop
                }
            }
            TaskLayout::Grid {
                num_agents,
                width,
                height,
                num_goals,
            } => {
                let goal_idx = self.family_id % num_goals;
                let w = *width as f64;
                let h = *height as f64;
                let col = (obs.as_slice()[0] * w).round() as i64;
                let row = (obs.as_slice()[1] * h).round() as i64;
                let goal_off = 2 + (num_agents - 1) * (2 + NUM_MOVES) + 2 * goal_idx;
                let dc = (obs.as_slice()[goal_off] * w).round() as i64;
                let dr = (obs.as_slice()[goal_off + 1] * h).round() as i64;
                let target = (row + dr, col + dc);

                let mut best_action = MOVE_STAY;
                let mut best_dist = i64::MAX;
                for &action in &self.params.tiebreak {
                    let next = apply_move((row, col), action, *height, *width);
                    let dist = (next.0 - target.0).abs() + (next.1 - target.1).abs();
                    if dist < best_dist {
                        best_dist = dist;
                        best_action = action;
                    }
                }
                best_action
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolRole {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeammatePool {
    pub role: PoolRole,
    pub num_families: usize,
    pub instances: Vec<TeammateInstance>,
}

impl TeammatePool {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("pool serializes");
        std::fs::write(path, json)
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Instance parameter distribution shared by both pools.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamDistribution {
    /// Epsilon is drawn uniformly from [0, eps_max].
    pub eps_max: f64,
    /// Whether tie-break priority is permuted per instance.
    pub permute_tiebreak: bool,
}

impl Default for ParamDistribution {
    fn default() -> Self {
        ParamDistribution {
            eps_max: 0.03,
            permute_tiebreak: false,
        }
    }
}

fn draw_instance(
    family_id: usize,
    dist: &ParamDistribution,
    used_seeds: &mut std::collections::HashSet<u64>,
    rng: &mut ChaCha8Rng,
) -> TeammateInstance {
    let epsilon = rng.gen_range(0.0..=dist.eps_max);
    let mut tiebreak = vec![MOVE_UP, MOVE_DOWN, MOVE_LEFT, MOVE_RIGHT, MOVE_STAY];
    if dist.permute_tiebreak {
        // Fisher-Yates over the priority list.
        for i in (1..tiebreak.len()).rev() {
            let j = rng.gen_range(0..=i);
            tiebreak.swap(i, j);
        }
    }
    let mut instance_seed = rng.gen::<u64>();
    while !used_seeds.insert(instance_seed) {
        instance_seed = rng.gen::<u64>();
    }
    TeammateInstance {
        family_id,
        params: InstanceParams { epsilon, tiebreak },
        instance_seed,
    }
}

/// Build disjoint train/test pools covering every family, deterministic
/// in the seed.
pub fn build_pools(
    num_families: usize,
    instances_per_family_train: usize,
    instances_per_family_test: usize,
    seed: u64,
    dist: &ParamDistribution,
) -> (TeammatePool, TeammatePool) {
    assert!(num_families >= 1, "need at least one family");
    assert!(
        instances_per_family_train >= 1 && instances_per_family_test >= 1,
        "need at least one instance per family per pool"
    );
    let mut rng = derive_rng(seed, "teammate-pools", 0);
    let mut used_seeds = std::collections::HashSet::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for family in 0..num_families {
        for _ in 0..instances_per_family_train {
            train.push(draw_instance(family, dist, &mut used_seeds, &mut rng));
        }
        for _ in 0..instances_per_family_test {
            test.push(draw_instance(family, dist, &mut used_seeds, &mut rng));
        }
    }
    (
        TeammatePool {
            role: PoolRole::Train,
            num_families,
            instances: train,
        },
        TeammatePool {
            role: PoolRole::Test,
            num_families,
            instances: test,
        },
    )
}

#[derive(Debug, thiserror::Error)]
pub enum TeammateError {
    #[error("observation has {got} entries, behavior expects {expected}")]
    ObsDimMismatch { got: usize, expected: usize },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Env, EpisodeContext, SignalConfig, SignalGame};

    fn noise_rng() -> ChaCha8Rng {
        derive_rng(0, "test-noise", 0)
    }

    #[test]
    fn pools_are_deterministic_and_disjoint() {
        let dist = ParamDistribution::default();
        let (train1, test1) = build_pools(5, 8, 4, 42, &dist);
        let (train2, test2) = build_pools(5, 8, 4, 42, &dist);
        assert_eq!(train1, train2);
        assert_eq!(test1, test2);
        assert_eq!(train1.len(), 40);
        assert_eq!(test1.len(), 20);

        for a in &train1.instances {
            for b in &test1.instances {
                assert!(
                    (a.family_id, &a.params, a.instance_seed)
                        != (b.family_id, &b.params, b.instance_seed)
                );
            }
        }
    }

    #[test]
    fn pool_family_frequencies_are_uniform() {
        let (train, _) = build_pools(5, 100, 1, 7, &ParamDistribution::default());
        assert_eq!(train.len(), 500);
        for family in 0..5 {
            let count = train
                .instances
                .iter()
                .filter(|i| i.family_id == family)
                .count();
            let freq = count as f64 / 500.0;
            assert!((freq - 0.2).abs() <= 0.05, "family {family} freq {freq}");
        }
    }

    #[test]
    fn signal_family_signals_then_noops() {
        let mut env = SignalGame::new(SignalConfig::default()).unwrap();
        let obs = env.reset(&EpisodeContext {
            seed: 0,
            controlled_slots: vec![0],
            teammate_family: 3,
        });
        let layout = env.layout();
        let mate = TeammateInstance::canonical(3);
        let mut rng = noise_rng();
        assert_eq!(mate.act(&layout, &obs[1], 0, &mut rng).unwrap(), 3);
        let r = env.step(&[5, 3, 3]).unwrap();
        assert_eq!(mate.act(&layout, &r.observations[1], 1, &mut rng).unwrap(), 5);
        let r = env.step(&[5, 5, 5]).unwrap();
        assert_eq!(mate.act(&layout, &r.observations[1], 2, &mut rng).unwrap(), 5);
    }

    #[test]
    fn distinct_families_signal_distinct_codes() {
        let mut env = SignalGame::new(SignalConfig::default()).unwrap();
        let obs = env.reset(&EpisodeContext {
            seed: 0,
            controlled_slots: vec![0],
            teammate_family: 0,
        });
        let layout = env.layout();
        let mut rng = noise_rng();
        let actions: Vec<usize> = (0..5)
            .map(|f| {
                TeammateInstance::canonical(f)
                    .act(&layout, &obs[1], 0, &mut rng)
                    .unwrap()
            })
            .collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(actions[i], actions[j]);
            }
        }
    }

    #[test]
    fn grid_greedy_moves_down_toward_goal_below() {
        // Teammate at (row 0, col 0), goal at (row 2, col 0): among the
        // distance-reducing moves only "down" qualifies.
        let layout = TaskLayout::Grid {
            num_agents: 3,
            width: 5,
            height: 5,
            num_goals: 3,
        };
        let mut obs = vec![0.0; 2 + 2 * (2 + NUM_MOVES) + 3 * 2 + 1];
        // own (x, y) = (0, 0); goal 0 at relative (dx, dy) = (0, 2)
        let goal_off = 2 + 2 * (2 + NUM_MOVES);
        obs[goal_off] = 0.0;
        obs[goal_off + 1] = 2.0 / 5.0;
        let mate = TeammateInstance::canonical(0);
        let mut rng = noise_rng();
        let action = mate.act(&layout, &Observation(obs), 1, &mut rng).unwrap();
        assert_eq!(action, MOVE_DOWN);
    }

    #[test]
    fn grid_greedy_stays_on_goal_mid_grid() {
        let layout = TaskLayout::Grid {
            num_agents: 3,
            width: 5,
            height: 5,
            num_goals: 3,
        };
        // Agent mid-grid on its goal: every move strictly increases the
        // distance, so stay is the unique minimizer. (At a wall a clamped
        // move can tie with stay and then wins on priority.)
        let mut obs = vec![0.0; 2 + 2 * (2 + NUM_MOVES) + 3 * 2 + 1];
        obs[0] = 2.0 / 5.0;
        obs[1] = 2.0 / 5.0;
        let mate = TeammateInstance::canonical(0);
        let mut rng = noise_rng();
        let action = mate.act(&layout, &Observation(obs), 0, &mut rng).unwrap();
        assert_eq!(action, MOVE_STAY);
    }

    #[test]
    fn epsilon_noise_disturbs_actions() {
        let layout = TaskLayout::Signal { num_types: 5 };
        let obs = Observation(vec![0.0; 3 * 6 + 1]);
        let mut noisy = TeammateInstance::canonical(2);
        noisy.params.epsilon = 1.0;
        let mut rng = noise_rng();
        let actions: std::collections::HashSet<usize> = (0..100)
            .map(|_| noisy.act(&layout, &obs, 1, &mut rng).unwrap())
            .collect();
        assert!(actions.len() > 1, "full noise must vary actions");
    }

    #[test]
    fn obs_dim_mismatch_is_error() {
        let layout = TaskLayout::Grid {
            num_agents: 3,
            width: 5,
            height: 5,
            num_goals: 3,
        };
        let mate = TeammateInstance::canonical(0);
        let mut rng = noise_rng();
        let bad = Observation(vec![0.0; 5]);
        assert!(matches!(
            mate.act(&layout, &bad, 0, &mut rng),
            Err(TeammateError::ObsDimMismatch { .. })
        ));
    }
}
