//! Property suites behind the `check` subcommand: gradient correctness of
//! the full training loss, structural masking of uncontrolled agents,
//! decoder causality, sampler uniformity, and the GAE oracle. The
//! acceptance tests run the same suites at their full strengths.

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::envs::{Env, EpisodeContext, Observation, SignalConfig, SignalGame, TaskEnv};
use crate::model::{HistoryBuffer, MatNaht, ModelConfig};
use crate::numerics::finite_diff_check;
use crate::rng::derive_rng;
use crate::sampler::sample_composition;
use crate::teammates::{build_pools, ParamDistribution, TeammateInstance};
use crate::training::{collect_rollouts, compute_gae, gae_direct_sum, minibatch_loss, AnyPolicy, PPOConfig};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckResult {
            name,
            passed,
            detail,
        }
    }
}

fn check_model(seed: u64) -> (TaskEnv, AnyPolicy) {
    let env = TaskEnv::Signal(SignalGame::new(SignalConfig::default()).unwrap());
    let spec = env.spec().clone();
    let cfg = ModelConfig {
        obs_dim: spec.obs_dim,
        num_actions: spec.num_actions,
        k: 2,
        d_model: 16,
        n_heads: 2,
        n_layers_enc: 2,
        n_layers_dec: 1,
        max_agents: spec.num_agents - 1,
    };
    (env, AnyPolicy::Mat(MatNaht::new(cfg, seed).unwrap()))
}

/// Full-model gradient check: the composed PPO minibatch loss on a
/// collected micro-batch versus central differences.
pub fn gradient_suite(n_coords: usize, tol: f64) -> CheckResult {
    let (env, policy) = check_model(17);
    let (pool, _) = build_pools(5, 2, 1, 17, &ParamDistribution::default());
    let mut buffer = collect_rollouts(&policy, &env, &pool, 3, 17, 0, None).unwrap();
    let ppo = PPOConfig::default();
    compute_gae(&mut buffer, ppo.gamma, ppo.gae_lambda);
    let episodes: Vec<&crate::training::EpisodeRecord> = buffer.episodes.iter().collect();

    let mut rng = derive_rng(17, "gradient-suite", 0);
    let report = finite_diff_check(
        policy.store(),
        || minibatch_loss(&policy, &episodes, &ppo).unwrap().total,
        n_coords,
        1e-5,
        tol,
        &mut rng,
    )
    .unwrap();
    CheckResult::new(
        "gradient_suite",
        report.passed(),
        format!(
            "max rel err {:.3e} over {} coords (tol {:.0e}); worst {:?}",
            report.max_rel_err, report.n_checked, tol, report.worst
        ),
    )
}

/// A recorded all-agent stream for masking perturbations.
struct RawEpisode {
    controlled: Vec<usize>,
    obs_stream: Vec<Vec<Observation>>,
    joint_actions: Vec<Vec<usize>>,
}

fn record_raw_episode(env_proto: &TaskEnv, family: usize, seed: u64) -> RawEpisode {
    let mut env = env_proto.clone();
    let controlled = vec![0usize, 1];
    let mut obs = env.reset(&EpisodeContext {
        seed,
        controlled_slots: controlled.clone(),
        teammate_family: family,
    });
    let layout = env.layout();
    let mate = TeammateInstance::canonical(family);
    let mut rng = derive_rng(seed, "masking-actions", 0);
    let num_actions = env.spec().num_actions;

    let mut obs_stream = vec![obs.clone()];
    let mut joint_actions = Vec::new();
    loop {
        let t = env.time();
        let mut joint = vec![0usize; env.spec().num_agents];
        for &slot in &controlled {
            joint[slot] = rng.gen_range(0..num_actions);
        }
        let mut dummy = derive_rng(0, "noise-free", 0);
        joint[2] = mate.act(&layout, &obs[2], t, &mut dummy).unwrap();
        let step = env.step(&joint).unwrap();
        joint_actions.push(joint);
        obs = step.observations;
        obs_stream.push(obs.clone());
        if step.done {
            break;
        }
    }
    RawEpisode {
        controlled,
        obs_stream,
        joint_actions,
    }
}

/// Loss value, per-step outputs, and all parameter gradients after
/// feeding a raw stream through the history pipeline; everything as
/// exact bits.
fn pipeline_fingerprint(policy: &AnyPolicy, raw: &RawEpisode) -> Vec<u64> {
    use crate::numerics::GradNode;
    let mut hist = HistoryBuffer::new(
        policy.history_window(),
        policy.obs_dim(),
        &raw.controlled,
        &raw.obs_stream[0],
    )
    .unwrap();
    let mut bits: Vec<u64> = Vec::new();
    let mut terms: Vec<GradNode> = Vec::new();
    for (t, joint) in raw.joint_actions.iter().enumerate() {
        let controlled_actions: Vec<usize> =
            raw.controlled.iter().map(|&s| joint[s]).collect();
        let (logps, ents, value) = policy.evaluate_actions(&hist, &controlled_actions).unwrap();
        for v in logps.value().data() {
            bits.push(v.to_bits());
        }
        for v in ents.value().data() {
            bits.push(v.to_bits());
        }
        bits.push(value.item().to_bits());
        terms.push(
            logps
                .sum_all()
                .add(&value.mul(&value).sum_all())
                .add(&ents.sum_all().scale(0.37)),
        );
        hist.record_step(joint, &raw.obs_stream[t + 1]).unwrap();
    }
    let loss = GradNode::sum_list(&terms);
    bits.push(loss.item().to_bits());
    policy.store().zero_grads();
    loss.backward().unwrap();
    for (_, node) in policy.store().iter() {
        if let Some(g) = node.grad() {
            for v in g.data() {
                bits.push(v.to_bits());
            }
        } else {
            bits.push(u64::MAX);
        }
    }
    policy.store().zero_grads();
    bits
}

/// Masking: perturbing uncontrolled agents' recorded observations and
/// actions must leave model outputs, the loss, and every parameter
/// gradient bit-identical.
pub fn masking_suite(n_perturbations: usize) -> CheckResult {
    let (env, policy) = check_model(23);
    let raw = record_raw_episode(&env, 3, 23);
    let reference = pipeline_fingerprint(&policy, &raw);

    let obs_dim = policy.obs_dim();
    let num_actions = policy.num_actions();
    let mut rng = derive_rng(23, "masking-perturb", 0);
    for p in 0..n_perturbations {
        let mut perturbed = RawEpisode {
            controlled: raw.controlled.clone(),
            obs_stream: raw.obs_stream.clone(),
            joint_actions: raw.joint_actions.clone(),
        };
        // Slot 2 is uncontrolled: garble its observations and actions.
        for step_obs in &mut perturbed.obs_stream {
            step_obs[2] = Observation((0..obs_dim).map(|_| rng.gen_range(-5.0..5.0)).collect());
        }
        for joint in &mut perturbed.joint_actions {
            joint[2] = rng.gen_range(0..num_actions);
        }
        let fingerprint = pipeline_fingerprint(&policy, &perturbed);
        if fingerprint != reference {
            return CheckResult::new(
                "masking_suite",
                false,
                format!("perturbation {p} changed outputs or gradients"),
            );
        }
    }
    CheckResult::new(
        "masking_suite",
        true,
        format!("{n_perturbations} uncontrolled-data perturbations, all bit-identical"),
    )
}

/// Decoder causality: agent-i logits are bit-identical under any change
/// of actions j > i, and the joint action distribution sums to one.
pub fn causality_suite() -> CheckResult {
    // Three-agent logits invariance on the signal model.
    let env = TaskEnv::Signal(SignalGame::new(SignalConfig {
        num_agents: 4,
        ..SignalConfig::default()
    })
    .unwrap());
    let spec = env.spec().clone();
    let model = MatNaht::new(
        ModelConfig {
            obs_dim: spec.obs_dim,
            num_actions: spec.num_actions,
            k: 2,
            d_model: 16,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 2,
            max_agents: 3,
        },
        31,
    )
    .unwrap();
    let mut env2 = env.clone();
    let obs = env2.reset(&EpisodeContext {
        seed: 5,
        controlled_slots: vec![0, 1, 2],
        teammate_family: 1,
    });
    let hist = HistoryBuffer::new(2, spec.obs_dim, &[0, 1, 2], &obs).unwrap();
    let enc = model.encode(&model.build_tokens(&hist).unwrap()).unwrap();

    let base = model_decoder_rows(&model, &enc, &[0, 0]);
    for a1 in 0..spec.num_actions {
        for a2 in 0..spec.num_actions {
            let alt = model_decoder_rows(&model, &enc, &[0, a2]);
            if base[0] != alt[0] || base[1] != alt[1] {
                return CheckResult::new(
                    "causality_suite",
                    false,
                    format!("agent logits moved under later action ({a1},{a2})"),
                );
            }
            let alt2 = model_decoder_rows(&model, &enc, &[a1, a2]);
            if base[0] != alt2[0] {
                return CheckResult::new(
                    "causality_suite",
                    false,
                    "agent 0 logits moved under action changes".into(),
                );
            }
        }
    }

    // Joint distribution mass by enumeration: N=2 agents, 3 actions.
    let env3 = TaskEnv::Signal(SignalGame::new(SignalConfig {
        num_agents: 3,
        num_types: 2,
        horizon: 4,
        gamma: 0.99,
    })
    .unwrap());
    let spec3 = env3.spec().clone();
    let model3 = MatNaht::new(
        ModelConfig {
            obs_dim: spec3.obs_dim,
            num_actions: spec3.num_actions,
            k: 2,
            d_model: 16,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            max_agents: 2,
        },
        37,
    )
    .unwrap();
    let mut env3c = env3.clone();
    let obs3 = env3c.reset(&EpisodeContext {
        seed: 6,
        controlled_slots: vec![0, 1],
        teammate_family: 0,
    });
    let hist3 = HistoryBuffer::new(2, spec3.obs_dim, &[0, 1], &obs3).unwrap();
    let enc3 = model3.encode(&model3.build_tokens(&hist3).unwrap()).unwrap();
    let mut mass = 0.0;
    for a0 in 0..spec3.num_actions {
        for a1 in 0..spec3.num_actions {
            let (logps, _) = model3.decode_teacher_forced(&enc3, &[a0, a1]).unwrap();
            mass += logps.value().data().iter().sum::<f64>().exp();
        }
    }
    let mass_ok = (mass - 1.0).abs() <= 1e-6;
    CheckResult::new(
        "causality_suite",
        mass_ok,
        format!("logits bit-stable under future-action perturbations; joint mass {mass:.9}"),
    )
}

/// Per-agent log-probability rows, read off by probing every action
/// index under teacher forcing. Row i only depends on actions before i,
/// so probing position i never disturbs the row being read.
fn model_decoder_rows(model: &MatNaht, enc: &crate::model::EncoderOutput, prev: &[usize]) -> Vec<Vec<u64>> {
    let mut full = prev.to_vec();
    full.push(0);
    let n = full.len();
    let a = model.cfg.num_actions;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(a);
        for cand in 0..a {
            let mut probe = full.clone();
            probe[i] = cand;
            let (lp, _) = model.decode_teacher_forced(enc, &probe).unwrap();
            row.push(lp.value().data()[i].to_bits());
        }
        rows.push(row);
    }
    rows
}

fn chi2_p(observed: &[usize], expected: &[f64]) -> f64 {
    let stat: f64 = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o as f64 - e) * (o as f64 - e) / e)
        .sum();
    let df = (observed.len() - 1) as f64;
    let dist = ChiSquared::new(df).unwrap();
    1.0 - dist.cdf(stat)
}

/// Sampler uniformity: N marginal (M=4), slot subsets given N=2 (M=3),
/// and teammate-instance choice, each χ²-tested at p > 0.001. With a
/// million draws the N frequencies must also sit within 1/3 ± 0.01.
pub fn sampler_suite(n_draws: usize) -> CheckResult {
    let (pool, _) = build_pools(5, 2, 1, 41, &ParamDistribution::default());
    let mut rng = derive_rng(41, "sampler-suite", 0);

    let mut n_counts = [0usize; 3];
    for _ in 0..n_draws {
        let comp = sample_composition(4, &pool, &mut rng);
        n_counts[comp.n_controlled() - 1] += 1;
    }
    let expected = vec![n_draws as f64 / 3.0; 3];
    let p_n = chi2_p(&n_counts, &expected);
    let freq_ok = if n_draws >= 1_000_000 {
        n_counts
            .iter()
            .all(|&c| (c as f64 / n_draws as f64 - 1.0 / 3.0).abs() <= 0.01)
    } else {
        true
    };

    let mut subset_counts: std::collections::BTreeMap<Vec<usize>, usize> = Default::default();
    let mut subset_total = 0usize;
    let subset_draws = n_draws.min(100_000);
    while subset_total < subset_draws {
        let comp = sample_composition(3, &pool, &mut rng);
        if comp.n_controlled() == 2 {
            *subset_counts.entry(comp.controlled_slots.clone()).or_insert(0) += 1;
            subset_total += 1;
        }
    }
    let subset_obs: Vec<usize> = subset_counts.values().copied().collect();
    let p_subsets = chi2_p(&subset_obs, &vec![subset_total as f64 / 3.0; 3]);

    let mut instance_counts = vec![0usize; pool.len()];
    let instance_draws = n_draws.min(100_000);
    for _ in 0..instance_draws {
        let comp = sample_composition(3, &pool, &mut rng);
        let idx = pool
            .instances
            .iter()
            .position(|i| *i == comp.teammate)
            .unwrap();
        instance_counts[idx] += 1;
    }
    let p_instances = chi2_p(
        &instance_counts,
        &vec![instance_draws as f64 / pool.len() as f64; pool.len()],
    );

    let passed =
        p_n > 0.001 && p_subsets > 0.001 && p_instances > 0.001 && freq_ok && subset_counts.len() == 3;
    CheckResult::new(
        "sampler_suite",
        passed,
        format!(
            "chi2 p-values: N {p_n:.4}, subsets {p_subsets:.4}, instances {p_instances:.4}; \
             N freqs {:?}",
            n_counts
                .iter()
                .map(|&c| c as f64 / n_draws as f64)
                .collect::<Vec<_>>()
        ),
    )
}

/// Recursive GAE equals the direct-sum definition within 1e-12.
pub fn gae_suite(n_episodes: usize) -> CheckResult {
    let mut rng = derive_rng(43, "gae-suite", 0);
    let mut worst = 0.0f64;
    for _ in 0..n_episodes {
        let t = rng.gen_range(1..=16);
        let rewards: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut dones = vec![false; t];
        dones[t - 1] = true;
        let gamma: f64 = rng.gen_range(0.0..=1.0);
        let lambda: f64 = rng.gen_range(0.0..=1.0);

        // Recursive pass, written as in compute_gae.
        let mut adv = vec![0.0; t];
        let mut running = 0.0;
        for i in (0..t).rev() {
            let not_done = if dones[i] { 0.0 } else { 1.0 };
            let next_v = if dones[i] || i + 1 == t { 0.0 } else { values[i + 1] };
            let delta = rewards[i] + gamma * next_v - values[i];
            running = delta + gamma * lambda * not_done * running;
            adv[i] = running;
        }
        let direct = gae_direct_sum(&rewards, &values, &dones, gamma, lambda);
        for (a, d) in adv.iter().zip(&direct) {
            worst = worst.max((a - d).abs());
        }
    }
    CheckResult::new(
        "gae_suite",
        worst <= 1e-12,
        format!("max |recursive - direct| = {worst:.3e} over {n_episodes} episodes"),
    )
}

/// The quick versions run by `naht-mat check`.
pub fn run_all_checks() -> Vec<CheckResult> {
    vec![
        gradient_suite(200, 1e-3),
        masking_suite(20),
        causality_suite(),
        sampler_suite(100_000),
        gae_suite(1000),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_quick_checks_pass() {
        for result in run_all_checks() {
            assert!(result.passed, "{}: {}", result.name, result.detail);
        }
    }
}
