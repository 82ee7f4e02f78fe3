//! The per-episode team sampling process X(U, C): draw how many agents
//! the learner controls, which slots they occupy, and which teammate
//! instance drives the rest.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::teammates::{TeammateInstance, TeammatePool};

/// One episode's slot assignment. All uncontrolled slots are driven by a
/// single teammate instance (one uncontrolled team per episode).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeamComposition {
    pub num_agents: usize,
    /// Sorted controlled slot indices; 1 ≤ len ≤ M−1.
    pub controlled_slots: Vec<usize>,
    pub teammate: TeammateInstance,
    pub episode_seed: u64,
}

impl TeamComposition {
    pub fn n_controlled(&self) -> usize {
        self.controlled_slots.len()
    }

    pub fn is_controlled(&self, slot: usize) -> bool {
        self.controlled_slots.binary_search(&slot).is_ok()
    }

    pub fn uncontrolled_slots(&self) -> Vec<usize> {
        (0..self.num_agents)
            .filter(|s| !self.is_controlled(*s))
            .collect()
    }
}

/// Sample a composition: N uniform on {1..M−1}, teammate instance uniform
/// over the pool, controlled slots a uniform size-N subset of the M slots.
pub fn sample_composition(
    num_agents: usize,
    pool: &TeammatePool,
    rng: &mut ChaCha8Rng,
) -> TeamComposition {
    assert!(num_agents >= 2, "need at least two slots");
    assert!(!pool.is_empty(), "empty teammate pool");
    let n = rng.gen_range(1..num_agents);
    let teammate = pool.instances[rng.gen_range(0..pool.len())].clone();

    // Partial Fisher-Yates: the first n entries are a uniform subset.
    let mut slots: Vec<usize> = (0..num_agents).collect();
    for i in 0..n {
        let j = rng.gen_range(i..num_agents);
        slots.swap(i, j);
    }
    let mut controlled: Vec<usize> = slots[..n].to_vec();
    controlled.sort_unstable();

    TeamComposition {
        num_agents,
        controlled_slots: controlled,
        teammate,
        episode_seed: rng.gen::<u64>(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use crate::teammates::{build_pools, ParamDistribution};

    fn pool() -> TeammatePool {
        build_pools(5, 2, 1, 0, &ParamDistribution::default()).0
    }

    #[test]
    fn two_agents_always_one_controlled() {
        let pool = pool();
        let mut rng = derive_rng(1, "sampler-test", 0);
        for _ in 0..100 {
            let comp = sample_composition(2, &pool, &mut rng);
            assert_eq!(comp.n_controlled(), 1);
            assert_eq!(comp.uncontrolled_slots().len(), 1);
        }
    }

    #[test]
    fn n_marginal_is_uniform() {
        let pool = pool();
        let mut rng = derive_rng(2, "sampler-test", 0);
        let draws = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            let comp = sample_composition(4, &pool, &mut rng);
            counts[comp.n_controlled() - 1] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.01, "freq {freq}");
        }
    }

    #[test]
    fn slot_subsets_are_uniform_given_n() {
        let pool = pool();
        let mut rng = derive_rng(3, "sampler-test", 0);
        let mut counts = std::collections::BTreeMap::new();
        let mut total = 0usize;
        while total < 100_000 {
            let comp = sample_composition(3, &pool, &mut rng);
            if comp.n_controlled() == 2 {
                *counts.entry(comp.controlled_slots.clone()).or_insert(0usize) += 1;
                total += 1;
            }
        }
        assert_eq!(counts.len(), 3);
        for (subset, c) in counts {
            let freq = c as f64 / total as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.01, "{subset:?} freq {freq}");
        }
    }

    #[test]
    fn composition_is_pure_function_of_rng() {
        let pool = pool();
        let a = sample_composition(4, &pool, &mut derive_rng(9, "replay", 3));
        let b = sample_composition(4, &pool, &mut derive_rng(9, "replay", 3));
        assert_eq!(a, b);
    }

    #[test]
    fn slots_partition_cleanly() {
        let pool = pool();
        let mut rng = derive_rng(4, "sampler-test", 0);
        for _ in 0..200 {
            let comp = sample_composition(5, &pool, &mut rng);
            let mut all: Vec<usize> = comp.controlled_slots.clone();
            all.extend(comp.uncontrolled_slots());
            all.sort_unstable();
            assert_eq!(all, (0..5).collect::<Vec<_>>());
        }
    }
}
