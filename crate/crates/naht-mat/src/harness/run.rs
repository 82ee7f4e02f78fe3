//! Command implementations behind the CLI: seeded training runs with
//! archived artifacts, checkpoint evaluation, the three-variant ablation,
//! the property-check suite, and config/model description.
//!
//! Every run directory contains the verbatim config copy, pools.json,
//! metrics.jsonl, checkpoints, and final evaluation reports — enough to
//! replay the run exactly.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::envs::Env;
use crate::harness::checks::{run_all_checks, CheckResult};
use crate::harness::eval::{evaluate, EvalReport};
use crate::harness::plot::emit_plot_data;
use crate::harness::{worker_cap, ExperimentConfig, HarnessError, Variant};
use crate::teammates::PoolRole;
use crate::training::{train, MetricsRecord, TrainOutcome};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub env_steps: usize,
    /// Highest periodic train-pool return observed within the budget.
    pub max_train_return: f64,
    pub final_train_return: f64,
    pub final_test_return: f64,
    pub per_family_train: BTreeMap<usize, f64>,
    pub per_family_test: BTreeMap<usize, f64>,
    pub per_n_test: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub seeds: Vec<SeedSummary>,
}

impl VariantSummary {
    pub fn mean_final_train(&self) -> f64 {
        self.seeds.iter().map(|s| s.final_train_return).sum::<f64>() / self.seeds.len() as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variants: BTreeMap<String, VariantSummary>,
    pub plot_csv: PathBuf,
    pub out_dir: PathBuf,
}

impl AblationSummary {
    pub fn variant(&self, v: Variant) -> &VariantSummary {
        &self.variants[v.dir_name()]
    }
}

/// Serialize both pools into the archived pools.json payload.
fn pools_json(cfg: &ExperimentConfig) -> String {
    let (train, test) = cfg.pools.build();
    serde_json::to_string_pretty(&serde_json::json!({
        "train": train,
        "test": test,
    }))
    .expect("pools serialize")
}

/// Train one (variant, seed) and archive artifacts under
/// `variant_dir/seed_<seed>/`. Returns the per-seed summary and the full
/// metrics stream.
fn run_seed(
    cfg: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    variant_dir: &Path,
) -> Result<(SeedSummary, Vec<MetricsRecord>), HarnessError> {
    let seed_dir = variant_dir.join(format!("seed_{seed}"));
    std::fs::create_dir_all(&seed_dir)?;

    let env = cfg.env.build().map_err(|e| HarnessError::BadConfig(e.to_string()))?;
    let (train_pool, test_pool) = cfg.pools.build();
    let mut policy = cfg.build_policy(variant, seed)?;

    let dump_path = cfg.run.trajectory_dump.then(|| seed_dir.join("trajectories.jsonl"));
    let outcome: TrainOutcome = train(
        &mut policy,
        &env,
        &train_pool,
        &test_pool,
        &cfg.ppo,
        &cfg.eval,
        seed,
        &seed_dir,
    )?;

    if let Some(path) = dump_path {
        // One greedy pool pass with per-step JSON lines for debugging.
        let mut sink = Vec::new();
        let mut comp_rng = crate::rng::derive_rng(seed, "traj-dump", 0);
        let comp = crate::sampler::sample_composition(
            env.spec().num_agents,
            &train_pool,
            &mut comp_rng,
        );
        crate::training::rollout::run_episode(&policy, &env, &comp, false, Some(&mut sink))?;
        let mut file = std::fs::File::create(path)?;
        for line in sink {
            writeln!(file, "{line}")?;
        }
    }

    let episodes_per_instance = cfg.eval.final_episodes_per_instance;
    let train_report = evaluate(&policy, &env, &train_pool, episodes_per_instance, &[seed])?;
    let test_report = evaluate(&policy, &env, &test_pool, episodes_per_instance, &[seed])?;
    write_json(&seed_dir.join("eval_train.json"), &train_report)?;
    write_json(&seed_dir.join("eval_test.json"), &test_report)?;

    let summary = SeedSummary {
        seed,
        env_steps: outcome.env_steps,
        max_train_return: outcome.max_train_return(),
        final_train_return: train_report.overall.mean,
        final_test_return: test_report.overall.mean,
        per_family_train: train_report
            .per_family
            .iter()
            .map(|(f, s)| (*f, s.mean))
            .collect(),
        per_family_test: test_report
            .per_family
            .iter()
            .map(|(f, s)| (*f, s.mean))
            .collect(),
        per_n_test: test_report.per_n.iter().map(|(n, s)| (*n, s.mean)).collect(),
    };
    Ok((summary, outcome.records))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("serialize"))?;
    Ok(())
}

fn prepare_variant_dir(
    cfg: &ExperimentConfig,
    variant: Variant,
    out_dir: &Path,
    pools_payload: &str,
) -> Result<PathBuf, HarnessError> {
    let dir = out_dir.join(variant.dir_name());
    std::fs::create_dir_all(&dir)?;
    let mut effective = cfg.clone();
    effective.run.variant = variant;
    std::fs::write(
        dir.join("config.toml"),
        toml::to_string_pretty(&effective).expect("config serializes"),
    )?;
    std::fs::write(dir.join("pools.json"), pools_payload)?;
    Ok(dir)
}

/// `train`: run every configured seed for the configured variant.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    raw_config: &str,
    out_override: Option<&Path>,
) -> Result<VariantSummary, HarnessError> {
    let out_dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.run.output_dir));
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.toml"), raw_config)?;

    let variant = cfg.run.variant;
    let pools_payload = pools_json(cfg);
    let variant_dir = prepare_variant_dir(cfg, variant, &out_dir, &pools_payload)?;

    let mut seeds = Vec::new();
    let mut streams = Vec::new();
    for &seed in &cfg.run.seeds {
        let (summary, records) = run_seed(cfg, variant, seed, &variant_dir)?;
        seeds.push(summary);
        streams.push(records);
    }
    let summary = VariantSummary { variant, seeds };
    write_json(&variant_dir.join("summary.json"), &summary)?;

    let mut by_variant = BTreeMap::new();
    by_variant.insert(variant.dir_name().to_string(), streams);
    emit_plot_data(&by_variant, &out_dir.join("plot_data.csv"))?;
    Ok(summary)
}

/// `ablate`: the three variants with shared pools and seeds, sequential
/// by default, optionally fanned out over isolated worker threads.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    raw_config: &str,
    parallel: bool,
    out_override: Option<&Path>,
) -> Result<AblationSummary, HarnessError> {
    let out_dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.run.output_dir));
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.toml"), raw_config)?;

    let pools_payload = pools_json(cfg);
    let mut jobs: Vec<(Variant, u64, PathBuf)> = Vec::new();
    for variant in Variant::ALL {
        let dir = prepare_variant_dir(cfg, variant, &out_dir, &pools_payload)?;
        for &seed in &cfg.run.seeds {
            jobs.push((variant, seed, dir.clone()));
        }
    }

    let workers = if parallel { worker_cap().min(jobs.len()) } else { 1 };
    type JobResult = Result<(SeedSummary, Vec<MetricsRecord>), HarnessError>;
    let results: Mutex<Vec<Option<JobResult>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next_job = AtomicUsize::new(0);

    std::thread::scope(|scope| {
        for _ in 0..workers.max(1) {
            scope.spawn(|| loop {
                let idx = next_job.fetch_add(1, Ordering::SeqCst);
                if idx >= jobs.len() {
                    break;
                }
                let (variant, seed, dir) = &jobs[idx];
                let result = run_seed(cfg, *variant, *seed, dir);
                results.lock().unwrap()[idx] = Some(result);
            });
        }
    });

    let mut collected = results.into_inner().unwrap();
    let mut variants: BTreeMap<String, VariantSummary> = BTreeMap::new();
    let mut streams: BTreeMap<String, Vec<Vec<MetricsRecord>>> = BTreeMap::new();
    for (idx, (variant, _, _)) in jobs.iter().enumerate() {
        let (summary, records) = collected[idx].take().expect("job ran")?;
        variants
            .entry(variant.dir_name().to_string())
            .or_insert_with(|| VariantSummary {
                variant: *variant,
                seeds: Vec::new(),
            })
            .seeds
            .push(summary);
        streams
            .entry(variant.dir_name().to_string())
            .or_default()
            .push(records);
    }

    let plot_csv = out_dir.join("plot_data.csv");
    emit_plot_data(&streams, &plot_csv)?;
    for summary in variants.values() {
        write_json(
            &out_dir.join(summary.variant.dir_name()).join("summary.json"),
            summary,
        )?;
    }
    let ablation = AblationSummary {
        variants,
        plot_csv,
        out_dir: out_dir.clone(),
    };
    write_json(&out_dir.join("ablation_summary.json"), &ablation)?;
    Ok(ablation)
}

/// `eval`: load a checkpoint and evaluate it on the train or test pool.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    pool_role: PoolRole,
    episodes_per_instance: usize,
    seeds: &[u64],
) -> Result<EvalReport, HarnessError> {
    if !ckpt.exists() {
        return Err(HarnessError::MissingCheckpoint(ckpt.display().to_string()));
    }
    let env = cfg.env.build().map_err(|e| HarnessError::BadConfig(e.to_string()))?;
    let (train_pool, test_pool) = cfg.pools.build();
    let pool = match pool_role {
        PoolRole::Train => train_pool,
        PoolRole::Test => test_pool,
    };
    let mut policy = cfg.build_policy(cfg.run.variant, cfg.run.seeds[0])?;
    policy.store_mut().load(ckpt)?;
    let seeds = if seeds.is_empty() {
        cfg.run.seeds.clone()
    } else {
        seeds.to_vec()
    };
    Ok(evaluate(&policy, &env, &pool, episodes_per_instance, &seeds)?)
}

/// `check`: run the property suites; true iff everything passed.
pub fn cmd_check() -> (Vec<CheckResult>, bool) {
    let results = run_all_checks();
    let ok = results.iter().all(|r| r.passed);
    (results, ok)
}

/// `describe`: config summary plus the model's layer table.
pub fn cmd_describe(cfg: &ExperimentConfig) -> Result<String, HarnessError> {
    let env = cfg.env.build().map_err(|e| HarnessError::BadConfig(e.to_string()))?;
    let spec = env.spec();
    let policy = cfg.build_policy(cfg.run.variant, cfg.run.seeds[0])?;
    let mut out = String::new();
    out.push_str(&format!(
        "task: {}\nagents: {}  obs_dim: {}  actions: {}  horizon: {}  gamma: {}\n",
        match cfg.env {
            crate::harness::EnvConfig::Signal(_) => "signal",
            crate::harness::EnvConfig::Gridworld(_) => "gridworld",
        },
        spec.num_agents,
        spec.obs_dim,
        spec.num_actions,
        spec.horizon,
        spec.gamma,
    ));
    out.push_str(&format!(
        "variant: {}\nseeds: {:?}\npools: {} families, {}+{} instances per family\n\n",
        cfg.run.variant,
        cfg.run.seeds,
        cfg.pools.num_families,
        cfg.pools.train_per_family,
        cfg.pools.test_per_family,
    ));
    out.push_str(&policy.describe());
    Ok(out)
}
