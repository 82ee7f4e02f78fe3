//! Pool evaluation with per-family and per-N stratification.
//!
//! Returns are collected with greedy decoding under the same composition
//! sampling as training, except that teammate instances are iterated so
//! every family gets coverage. Confidence intervals are the normal
//! approximation over per-seed means: mean ± 1.96·s/√n with the sample
//! standard deviation s; a single seed yields a degenerate interval.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::envs::{Env, TaskEnv};
use crate::rng::derive_rng;
use crate::sampler::{sample_composition, TeamComposition};
use crate::teammates::{PoolRole, TeammatePool};
use crate::training::rollout::run_episode;
use crate::training::{AnyPolicy, TrainError};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_seeds: usize,
    pub n_episodes: usize,
    /// True when only one seed contributed (interval collapses).
    pub degenerate: bool,
}

pub fn normal_ci(per_seed_means: &[f64]) -> CellStats {
    let n = per_seed_means.len();
    assert!(n > 0);
    let mean = per_seed_means.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return CellStats {
            mean,
            ci_lo: mean,
            ci_hi: mean,
            n_seeds: 1,
            n_episodes: 0,
            degenerate: true,
        };
    }
    let var = per_seed_means
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / (n - 1) as f64;
    let half = 1.96 * var.sqrt() / (n as f64).sqrt();
    CellStats {
        mean,
        ci_lo: mean - half,
        ci_hi: mean + half,
        n_seeds: n,
        n_episodes: 0,
        degenerate: false,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub pool_role: PoolRole,
    pub overall: CellStats,
    pub per_family: BTreeMap<usize, CellStats>,
    pub per_n: BTreeMap<usize, CellStats>,
}

/// Evaluate a policy on every instance of a pool.
///
/// For each seed, each instance runs `episodes_per_instance` episodes;
/// the subteam size and slots are sampled per episode exactly as in
/// training. Cells never sampled are absent from the maps, not zero.
pub fn evaluate(
    policy: &AnyPolicy,
    env_proto: &TaskEnv,
    pool: &TeammatePool,
    episodes_per_instance: usize,
    seeds: &[u64],
) -> Result<EvalReport, TrainError> {
    let m = env_proto.spec().num_agents;
    // per seed: (overall returns, family -> returns, n -> returns)
    let mut overall_means: Vec<f64> = Vec::with_capacity(seeds.len());
    let mut family_means: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut n_means: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut total_episodes = 0usize;

    for &seed in seeds {
        let mut returns: Vec<f64> = Vec::new();
        let mut by_family: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut episode_idx = 0u64;
        for instance in &pool.instances {
            for _ in 0..episodes_per_instance {
                let mut rng = derive_rng(seed, "harness-eval", episode_idx);
                episode_idx += 1;
                // Sample N and slots like the trainer, then pin the
                // instance under evaluation.
                let sampled = sample_composition(m, pool, &mut rng);
                let comp = TeamComposition {
                    teammate: instance.clone(),
                    ..sampled
                };
                let record = run_episode(policy, env_proto, &comp, false, None)?;
                let ret = record.undiscounted_return();
                returns.push(ret);
                by_family.entry(instance.family_id).or_default().push(ret);
                by_n.entry(comp.controlled_slots.len()).or_default().push(ret);
                total_episodes += 1;
            }
        }
        if returns.is_empty() {
            continue;
        }
        overall_means.push(returns.iter().sum::<f64>() / returns.len() as f64);
        for (family, rs) in by_family {
            family_means
                .entry(family)
                .or_default()
                .push(rs.iter().sum::<f64>() / rs.len() as f64);
        }
        for (n, rs) in by_n {
            n_means
                .entry(n)
                .or_default()
                .push(rs.iter().sum::<f64>() / rs.len() as f64);
        }
    }

    assert!(
        !overall_means.is_empty(),
        "evaluation needs at least one seed and one episode"
    );
    let mut overall = normal_ci(&overall_means);
    overall.n_episodes = total_episodes;
    let stats_of = |means: BTreeMap<usize, Vec<f64>>| -> BTreeMap<usize, CellStats> {
        means
            .into_iter()
            .map(|(key, ms)| (key, normal_ci(&ms)))
            .collect()
    };
    Ok(EvalReport {
        pool_role: pool.role,
        overall,
        per_family: stats_of(family_means),
        per_n: stats_of(n_means),
    })
}
