//! Independent PPO baseline.
//!
//! A shared two-layer MLP maps each agent's current observation plus its
//! own flattened k-step history to action logits, with no cross-agent
//! conditioning in the policy. The value pathway is an MLP over the
//! concatenated current observations of all controlled agents,
//! zero-padded to the maximum subteam size. This is a simplified
//! independent-policy comparison point, not a reimplementation of any
//! agent-modeling method.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{DecodeResult, HistoryBuffer, ModelError};
use crate::numerics::{GradNode, Linear, ParamStore, Tensor};
use crate::rng::derive_rng;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub obs_dim: usize,
    pub num_actions: usize,
    pub k: usize,
    pub hidden: usize,
    pub max_agents: usize,
}

impl BaselineConfig {
    pub fn policy_input_dim(&self) -> usize {
        self.obs_dim + self.k * (self.obs_dim + self.num_actions)
    }

    pub fn value_input_dim(&self) -> usize {
        self.max_agents * self.obs_dim
    }
}

pub struct BaselinePolicy {
    pub cfg: BaselineConfig,
    store: ParamStore,
    policy_l1: Linear,
    policy_l2: Linear,
    value_l1: Linear,
    value_l2: Linear,
}

impl BaselinePolicy {
    pub fn new(cfg: BaselineConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = derive_rng(seed, "baseline-init", 0);
        let policy_l1 = Linear::new(
            &mut store,
            "policy.l1",
            cfg.policy_input_dim(),
            cfg.hidden,
            &mut rng,
        );
        let policy_l2 = Linear::new(&mut store, "policy.l2", cfg.hidden, cfg.num_actions, &mut rng);
        let value_l1 = Linear::new(
            &mut store,
            "value.l1",
            cfg.value_input_dim(),
            cfg.hidden,
            &mut rng,
        );
        let value_l2 = Linear::new(&mut store, "value.l2", cfg.hidden, 1, &mut rng);
        BaselinePolicy {
            cfg,
            store,
            policy_l1,
            policy_l2,
            value_l1,
            value_l2,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn policy_inputs(&self, hist: &HistoryBuffer) -> GradNode {
        let n = hist.n_controlled();
        let dim = self.cfg.policy_input_dim();
        let mut rows = Vec::with_capacity(n * dim);
        for i in 0..n {
            rows.extend(hist.flat_input(i, self.cfg.num_actions));
        }
        GradNode::leaf(Tensor::new(vec![n, dim], rows).expect("baseline policy input"))
    }

    fn value_input(&self, hist: &HistoryBuffer) -> GradNode {
        let dim = self.cfg.value_input_dim();
        let mut row = Vec::with_capacity(dim);
        for i in 0..hist.n_controlled().min(self.cfg.max_agents) {
            row.extend_from_slice(hist.current_obs(i));
        }
        row.resize(dim, 0.0);
        GradNode::leaf(Tensor::new(vec![1, dim], row).expect("baseline value input"))
    }

    fn logits(&self, hist: &HistoryBuffer) -> GradNode {
        let x = self.policy_inputs(hist);
        self.policy_l2.forward(&self.policy_l1.forward(&x).gelu())
    }

    fn value_node(&self, hist: &HistoryBuffer) -> GradNode {
        let x = self.value_input(hist);
        self.value_l2.forward(&self.value_l1.forward(&x).gelu())
    }

    pub fn act(
        &self,
        hist: &HistoryBuffer,
        sample: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(DecodeResult, f64), ModelError> {
        let n = hist.n_controlled();
        let ls = self.logits(hist).log_softmax_rows();
        let mut actions = Vec::with_capacity(n);
        let mut log_probs = Vec::with_capacity(n);
        let mut entropy = Vec::with_capacity(n);
        ls.with_value(|t| {
            for i in 0..n {
                let row = t.row(i);
                let probs: Vec<f64> = row.iter().map(|&v| v.exp()).collect();
                let action = if sample {
                    let u: f64 = rng.gen();
                    let mut cum = 0.0;
                    let mut chosen = probs.len() - 1;
                    for (j, &p) in probs.iter().enumerate() {
                        cum += p;
                        if u < cum {
                            chosen = j;
                            break;
                        }
                    }
                    chosen
                } else {
                    let mut best = 0;
                    for (j, &p) in probs.iter().enumerate() {
                        if p > probs[best] {
                            best = j;
                        }
                    }
                    best
                };
                actions.push(action);
                log_probs.push(row[action]);
                entropy.push(-row.iter().zip(&probs).map(|(l, p)| l * p).sum::<f64>());
            }
        });
        let value = self.value_node(hist).item();
        Ok((
            DecodeResult {
                actions,
                log_probs,
                entropy,
            },
            value,
        ))
    }

    pub fn evaluate_actions(
        &self,
        hist: &HistoryBuffer,
        actions: &[usize],
    ) -> Result<(GradNode, GradNode, GradNode), ModelError> {
        for &a in actions {
            if a >= self.cfg.num_actions {
                return Err(ModelError::BadAction {
                    action: a,
                    num_actions: self.cfg.num_actions,
                });
            }
        }
        let ls = self.logits(hist).log_softmax_rows();
        let entries: Vec<(usize, usize)> = actions.iter().copied().enumerate().collect();
        let log_probs = ls.select_entries(&entries);
        let entropy = ls.exp().mul(&ls).sum_rows().scale(-1.0);
        Ok((log_probs, entropy, self.value_node(hist)))
    }

    pub fn describe(&self) -> String {
        let mut out = format!(
            "independent PPO baseline: hidden={} k={} obs_dim={} actions={} max_agents={}\n",
            self.cfg.hidden, self.cfg.k, self.cfg.obs_dim, self.cfg.num_actions, self.cfg.max_agents,
        );
        for (name, node) in self.store.iter() {
            out.push_str(&format!("  {:32} {:?}\n", name, node.shape()));
        }
        out.push_str(&format!("total parameters: {}\n", self.store.num_scalars()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Observation;

    fn cfg() -> BaselineConfig {
        BaselineConfig {
            obs_dim: 3,
            num_actions: 4,
            k: 2,
            hidden: 8,
            max_agents: 2,
        }
    }

    fn hist() -> HistoryBuffer {
        let init = vec![
            Observation(vec![0.1, 0.2, 0.3]),
            Observation(vec![0.4, 0.5, 0.6]),
            Observation(vec![0.0; 3]),
        ];
        let mut h = HistoryBuffer::new(2, 3, &[0, 1], &init).unwrap();
        h.record_step(&[1, 2, 3], &init).unwrap();
        h
    }

    #[test]
    fn policy_is_independent_across_agents() {
        // Changing agent 1's history must not move agent 0's logits.
        let b = BaselinePolicy::new(cfg(), 0);
        let h1 = hist();
        let init2 = vec![
            Observation(vec![0.1, 0.2, 0.3]),
            Observation(vec![-0.9, 0.5, 0.6]),
            Observation(vec![0.0; 3]),
        ];
        let mut h2 = HistoryBuffer::new(2, 3, &[0, 1], &init2).unwrap();
        h2.record_step(&[1, 3, 3], &init2).unwrap();

        let l1 = b.logits(&h1).value();
        let l2 = b.logits(&h2).value();
        assert_eq!(l1.row(0), l2.row(0));
        assert_ne!(l1.row(1), l2.row(1));
    }

    #[test]
    fn sampled_logps_match_teacher_forcing() {
        let b = BaselinePolicy::new(cfg(), 1);
        let h = hist();
        let mut rng = derive_rng(0, "baseline-test", 0);
        let (decoded, _) = b.act(&h, true, &mut rng).unwrap();
        let (logps, _, _) = b.evaluate_actions(&h, &decoded.actions).unwrap();
        for (a, b) in decoded.log_probs.iter().zip(logps.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        use crate::numerics::finite_diff_check;
        let b = BaselinePolicy::new(cfg(), 2);
        let h = hist();
        let mut rng = derive_rng(1, "baseline-gradcheck", 0);
        let report = finite_diff_check(
            b.store(),
            || {
                let (logps, ents, value) = b.evaluate_actions(&h, &[1, 2]).unwrap();
                logps
                    .sum_all()
                    .add(&value.mul(&value).sum_all())
                    .add(&ents.sum_all().scale(0.1))
            },
            60,
            1e-5,
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
