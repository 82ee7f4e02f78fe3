//! The training loop: collect rollouts, compute advantages, update,
//! periodically evaluate on the train and test pools with greedy
//! decoding, and stream metrics.
//!
//! metrics.jsonl holds only deterministic fields so that identical
//! (config, seed) runs are byte-identical; wall-clock timings go to a
//! timings.jsonl sidecar.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::envs::TaskEnv;
use crate::rng::derive_rng;
use crate::teammates::TeammatePool;
use crate::training::{
    collect_rollouts, compute_gae, eval_rollouts, ppo_update_at, AnyPolicy, PPOConfig, TrainError,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Evaluate every this many iterations (plus iteration 0 and the end).
    pub eval_every: usize,
    /// Episodes per pool per periodic evaluation.
    pub eval_episodes: usize,
    /// Episodes per teammate instance in the final stratified report.
    #[serde(default = "default_final_episodes")]
    pub final_episodes_per_instance: usize,
}

fn default_final_episodes() -> usize {
    10
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            eval_every: 5,
            eval_episodes: 30,
            final_episodes_per_instance: default_final_episodes(),
        }
    }
}

/// One line of metrics.jsonl. Field order is fixed by the struct.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub env_steps: usize,
    pub mean_train_return: f64,
    pub mean_test_return: f64,
    pub per_family_test_return: std::collections::BTreeMap<String, f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub n_histogram: std::collections::BTreeMap<String, usize>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub iterations: usize,
    pub env_steps: usize,
    pub records: Vec<MetricsRecord>,
    pub best_train_return: f64,
    pub final_train_return: f64,
    pub final_test_return: f64,
    pub metrics_path: PathBuf,
    pub best_ckpt: PathBuf,
    pub final_ckpt: PathBuf,
}

impl TrainOutcome {
    /// Highest train return any evaluation reached within the budget.
    pub fn max_train_return(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.mean_train_return)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Train a policy until the step budget is exhausted. With a zero budget
/// only the initial evaluation is emitted.
pub fn train(
    policy: &mut AnyPolicy,
    env: &TaskEnv,
    train_pool: &TeammatePool,
    test_pool: &TeammatePool,
    ppo: &PPOConfig,
    eval: &EvalSettings,
    seed: u64,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    ppo.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let timings_path = out_dir.join("timings.jsonl");
    let best_ckpt = out_dir.join("best.ckpt");
    let final_ckpt = out_dir.join("final.ckpt");
    let mut metrics_file = std::fs::File::create(&metrics_path)?;
    let mut timings_file = std::fs::File::create(&timings_path)?;

    let started = Instant::now();
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut env_steps = 0usize;
    let mut iteration = 0usize;
    let mut episode_counter = 0u64;
    let mut best_train_return = f64::NEG_INFINITY;
    let mut update_rng = derive_rng(seed, "ppo-minibatch", 0);

    let mut losses = (0.0f64, 0.0f64, 0.0f64);
    let mut n_histogram: std::collections::BTreeMap<String, usize> = Default::default();

    macro_rules! evaluate_now {
        () => {{
            let train_eval = eval_rollouts(
                policy,
                env,
                train_pool,
                eval.eval_episodes,
                derive_eval_seed(seed, iteration, 0),
            )?;
            let test_eval = eval_rollouts(
                policy,
                env,
                test_pool,
                eval.eval_episodes,
                derive_eval_seed(seed, iteration, 1),
            )?;
            let record = MetricsRecord {
                iteration,
                env_steps,
                mean_train_return: train_eval.mean_return(),
                mean_test_return: test_eval.mean_return(),
                per_family_test_return: test_eval
                    .per_family()
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect(),
                policy_loss: losses.0,
                value_loss: losses.1,
                entropy: losses.2,
                n_histogram: n_histogram.clone(),
                seed,
            };
            writeln!(metrics_file, "{}", serde_json::to_string(&record).unwrap())?;
            writeln!(
                timings_file,
                "{}",
                serde_json::json!({
                    "iteration": iteration,
                    "wall_ms": started.elapsed().as_millis() as u64,
                })
            )?;
            if record.mean_train_return > best_train_return {
                best_train_return = record.mean_train_return;
                policy.store().save(&best_ckpt)?;
            }
            records.push(record);
        }};
    }

    evaluate_now!();

    while env_steps < ppo.total_env_steps {
        let mut buffer = collect_rollouts(
            policy,
            env,
            train_pool,
            ppo.rollout_episodes,
            seed,
            episode_counter,
            None,
        )?;
        episode_counter += ppo.rollout_episodes as u64;
        env_steps += buffer.env_steps;

        n_histogram.clear();
        for ep in &buffer.episodes {
            *n_histogram
                .entry(ep.composition.n_controlled().to_string())
                .or_insert(0) += 1;
        }

        compute_gae(&mut buffer, ppo.gamma, ppo.gae_lambda);
        let progress = env_steps as f64 / ppo.total_env_steps.max(1) as f64;
        let report = ppo_update_at(policy, &buffer, ppo, progress, &mut update_rng)?;
        losses = (report.policy_loss, report.value_loss, report.entropy);
        iteration += 1;

        if iteration % eval.eval_every == 0 || env_steps >= ppo.total_env_steps {
            evaluate_now!();
        }
    }

    policy.store().save(&final_ckpt)?;
    metrics_file.flush()?;
    timings_file.flush()?;

    let last = records.last().expect("at least the initial evaluation");
    Ok(TrainOutcome {
        iterations: iteration,
        env_steps,
        best_train_return,
        final_train_return: last.mean_train_return,
        final_test_return: last.mean_test_return,
        records,
        metrics_path,
        best_ckpt,
        final_ckpt,
    })
}

fn derive_eval_seed(seed: u64, iteration: usize, pool_tag: u64) -> u64 {
    seed ^ (iteration as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (pool_tag << 56)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Env, SignalConfig, SignalGame};
    use crate::model::{MatNaht, ModelConfig};
    use crate::teammates::{build_pools, ParamDistribution};

    fn setup(dir: &Path) -> (AnyPolicy, TaskEnv, TeammatePool, TeammatePool) {
        std::fs::create_dir_all(dir).unwrap();
        let env = TaskEnv::Signal(SignalGame::new(SignalConfig::default()).unwrap());
        let spec = env.spec().clone();
        let policy = AnyPolicy::Mat(
            MatNaht::new(
                ModelConfig {
                    obs_dim: spec.obs_dim,
                    num_actions: spec.num_actions,
                    k: 3,
                    d_model: 8,
                    n_heads: 2,
                    n_layers_enc: 1,
                    n_layers_dec: 1,
                    max_agents: 2,
                },
                0,
            )
            .unwrap(),
        );
        let (train, test) = build_pools(5, 2, 1, 0, &ParamDistribution::default());
        (policy, env, train, test)
    }

    #[test]
    fn zero_budget_emits_initial_evaluation_only() {
        let dir = std::env::temp_dir().join(format!("naht-train0-{}", std::process::id()));
        let (mut policy, env, train_pool, test_pool) = setup(&dir);
        let ppo = PPOConfig {
            total_env_steps: 0,
            ..PPOConfig::default()
        };
        let eval = EvalSettings {
            eval_every: 1,
            eval_episodes: 4,
            final_episodes_per_instance: 1,
        };
        let outcome = train(
            &mut policy, &env, &train_pool, &test_pool, &ppo, &eval, 0, &dir,
        )
        .unwrap();
        assert_eq!(outcome.iterations, 0);
        assert_eq!(outcome.records.len(), 1);
        assert_eq!(outcome.records[0].env_steps, 0);
        let metrics = std::fs::read_to_string(&outcome.metrics_path).unwrap();
        assert_eq!(metrics.lines().count(), 1);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn short_run_is_deterministic_and_writes_artifacts() {
        let dir_a = std::env::temp_dir().join(format!("naht-train-a-{}", std::process::id()));
        let dir_b = std::env::temp_dir().join(format!("naht-train-b-{}", std::process::id()));
        let ppo = PPOConfig {
            total_env_steps: 128,
            rollout_episodes: 8,
            minibatch_episodes: 4,
            epochs: 2,
            ..PPOConfig::default()
        };
        let eval = EvalSettings {
            eval_every: 1,
            eval_episodes: 6,
            final_episodes_per_instance: 1,
        };

        let (mut pa, env, train_pool, test_pool) = setup(&dir_a);
        let oa = train(&mut pa, &env, &train_pool, &test_pool, &ppo, &eval, 9, &dir_a).unwrap();
        let (mut pb, env2, train2, test2) = setup(&dir_b);
        let ob = train(&mut pb, &env2, &train2, &test2, &ppo, &eval, 9, &dir_b).unwrap();

        let ma = std::fs::read(&oa.metrics_path).unwrap();
        let mb = std::fs::read(&ob.metrics_path).unwrap();
        assert_eq!(ma, mb, "metrics.jsonl must be byte-identical across runs");
        assert!(oa.best_ckpt.exists() && oa.final_ckpt.exists());
        assert!(oa.env_steps >= 128);
        std::fs::remove_dir_all(&dir_a).ok();
        std::fs::remove_dir_all(&dir_b).ok();
    }
}
