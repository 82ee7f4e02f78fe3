//! Per-episode history of the controlled agents.
//!
//! The buffer ingests full M-agent observation arrays plus the episode's
//! composition and keeps only the controlled slots' data. Uncontrolled
//! agents' observations and actions are never stored, so the masking of
//! the architecture is structural: there is nothing downstream to leak.

use std::collections::VecDeque;

use crate::envs::Observation;
use crate::model::ModelError;

#[derive(Clone, Debug)]
pub struct HistoryBuffer {
    k: usize,
    obs_dim: usize,
    controlled_slots: Vec<usize>,
    /// Oldest-first ring of (observation, action) per controlled slot.
    past: Vec<VecDeque<(Vec<f64>, usize)>>,
    current: Vec<Vec<f64>>,
}

impl HistoryBuffer {
    /// Start an episode: store the controlled slots' initial observations.
    pub fn new(
        k: usize,
        obs_dim: usize,
        controlled_slots: &[usize],
        initial_obs: &[Observation],
    ) -> Result<Self, ModelError> {
        if controlled_slots.is_empty() {
            return Err(ModelError::NoControlledAgents);
        }
        let mut current = Vec::with_capacity(controlled_slots.len());
        for &slot in controlled_slots {
            let obs = &initial_obs[slot];
            if obs.len() != obs_dim {
                return Err(ModelError::ObsDimMismatch {
                    got: obs.len(),
                    expected: obs_dim,
                });
            }
            current.push(obs.as_slice().to_vec());
        }
        Ok(HistoryBuffer {
            k,
            obs_dim,
            controlled_slots: controlled_slots.to_vec(),
            past: vec![VecDeque::with_capacity(k + 1); controlled_slots.len()],
            current,
        })
    }

    /// Rebuild a buffer from controlled-agent data alone (training-time
    /// replay of stored episodes). Slot identities are irrelevant to the
    /// model; only the count and order matter.
    pub fn from_controlled(k: usize, obs_dim: usize, initial: &[Vec<f64>]) -> Self {
        assert!(!initial.is_empty());
        HistoryBuffer {
            k,
            obs_dim,
            controlled_slots: (0..initial.len()).collect(),
            past: vec![VecDeque::with_capacity(k + 1); initial.len()],
            current: initial.to_vec(),
        }
    }

    /// Advance a replayed buffer by one step of controlled-only data.
    pub fn record_controlled(&mut self, actions: &[usize], next: &[Vec<f64>]) {
        assert_eq!(actions.len(), self.current.len());
        assert_eq!(next.len(), self.current.len());
        for i in 0..self.current.len() {
            if self.k > 0 {
                let prev = std::mem::replace(&mut self.current[i], next[i].clone());
                self.past[i].push_back((prev, actions[i]));
                if self.past[i].len() > self.k {
                    self.past[i].pop_front();
                }
            } else {
                self.current[i] = next[i].clone();
            }
        }
    }

    /// Fold one transition in: the joint action taken and the next
    /// observations, both over all M slots. Only controlled entries are
    /// read.
    pub fn record_step(
        &mut self,
        joint_action: &[usize],
        next_obs: &[Observation],
    ) -> Result<(), ModelError> {
        for (i, &slot) in self.controlled_slots.iter().enumerate() {
            if self.k > 0 {
                let prev = std::mem::take(&mut self.current[i]);
                self.past[i].push_back((prev, joint_action[slot]));
                if self.past[i].len() > self.k {
                    self.past[i].pop_front();
                }
            }
            let obs = &next_obs[slot];
            if obs.len() != self.obs_dim {
                return Err(ModelError::ObsDimMismatch {
                    got: obs.len(),
                    expected: self.obs_dim,
                });
            }
            self.current[i] = obs.as_slice().to_vec();
        }
        Ok(())
    }

    pub fn n_controlled(&self) -> usize {
        self.controlled_slots.len()
    }

    pub fn controlled_slots(&self) -> &[usize] {
        &self.controlled_slots
    }

    pub fn window(&self) -> usize {
        self.k
    }

    /// Number of in-window past steps (identical for every slot).
    pub fn valid_len(&self) -> usize {
        self.past.first().map_or(0, |p| p.len())
    }

    pub fn current_obs(&self, i: usize) -> &[f64] {
        &self.current[i]
    }

    /// Past entry of controlled agent `i` at relative timestep δ ≥ 1
    /// (δ = 1 is the most recent).
    pub fn past_entry(&self, i: usize, delta: usize) -> &(Vec<f64>, usize) {
        let len = self.past[i].len();
        &self.past[i][len - delta]
    }

    /// Flattened per-agent input for the independent baseline: current
    /// observation, then the most recent k (observation, one-hot action)
    /// pairs, zero-padded at the tail when the episode is young.
    pub fn flat_input(&self, i: usize, num_actions: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.obs_dim + self.k * (self.obs_dim + num_actions));
        v.extend_from_slice(&self.current[i]);
        let valid = self.past[i].len();
        for delta in 1..=self.k {
            if delta <= valid {
                let (obs, action) = self.past_entry(i, delta);
                v.extend_from_slice(obs);
                let mut onehot = vec![0.0; num_actions];
                onehot[*action] = 1.0;
                v.extend_from_slice(&onehot);
            } else {
                v.extend(std::iter::repeat(0.0).take(self.obs_dim + num_actions));
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(vals: &[f64]) -> Observation {
        Observation(vals.to_vec())
    }

    #[test]
    fn keeps_only_controlled_and_last_k() {
        let init = vec![obs(&[0.0, 0.0]), obs(&[1.0, 1.0]), obs(&[2.0, 2.0])];
        let mut hist = HistoryBuffer::new(2, 2, &[0, 2], &init).unwrap();
        assert_eq!(hist.n_controlled(), 2);
        assert_eq!(hist.valid_len(), 0);

        for t in 0..4 {
            let next = vec![
                obs(&[t as f64, 0.1]),
                obs(&[9.0, 9.0]),
                obs(&[t as f64, 0.2]),
            ];
            hist.record_step(&[t % 3, 7, (t + 1) % 3], &next).unwrap();
        }
        assert_eq!(hist.valid_len(), 2);
        // Most recent entry for slot 0 carries the t=2 observation and
        // the action taken at t=3.
        let (o, a) = hist.past_entry(0, 1);
        assert_eq!(o[0], 2.0);
        assert_eq!(*a, 3 % 3);
        assert_eq!(hist.current_obs(0)[0], 3.0);
    }

    #[test]
    fn k_zero_keeps_no_past() {
        let init = vec![obs(&[0.0]), obs(&[1.0])];
        let mut hist = HistoryBuffer::new(0, 1, &[1], &init).unwrap();
        hist.record_step(&[0, 1], &[obs(&[0.5]), obs(&[1.5])]).unwrap();
        assert_eq!(hist.valid_len(), 0);
        assert_eq!(hist.current_obs(0)[0], 1.5);
    }

    #[test]
    fn uncontrolled_data_never_enters() {
        let init_a = vec![obs(&[0.0]), obs(&[5.0])];
        let init_b = vec![obs(&[0.0]), obs(&[-3.0])];
        let mut a = HistoryBuffer::new(2, 1, &[0], &init_a).unwrap();
        let mut b = HistoryBuffer::new(2, 1, &[0], &init_b).unwrap();
        a.record_step(&[1, 0], &[obs(&[0.7]), obs(&[4.0])]).unwrap();
        b.record_step(&[1, 2], &[obs(&[0.7]), obs(&[8.0])]).unwrap();
        assert_eq!(a.flat_input(0, 3), b.flat_input(0, 3));
    }

    #[test]
    fn flat_input_zero_pads_young_episodes() {
        let init = vec![obs(&[0.25, 0.5]), obs(&[0.0, 0.0])];
        let hist = HistoryBuffer::new(3, 2, &[0], &init).unwrap();
        let flat = hist.flat_input(0, 4);
        assert_eq!(flat.len(), 2 + 3 * (2 + 4));
        assert_eq!(&flat[..2], &[0.25, 0.5]);
        assert!(flat[2..].iter().all(|&v| v == 0.0));
    }
}
