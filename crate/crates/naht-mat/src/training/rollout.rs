//! Episode collection: sample a composition, bind teammate slots, run the
//! policy over its history buffer, store controlled-agent records.
//!
//! Every random decision derives from (run seed, purpose, episode index),
//! so a logged composition plus its episode seed replays bit-exactly.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::envs::{Env, EpisodeContext, TaskEnv};
use crate::model::HistoryBuffer;
use crate::rng::derive_rng;
use crate::sampler::{sample_composition, TeamComposition};
use crate::teammates::TeammatePool;
use crate::training::{AnyPolicy, EpisodeRecord, TrainError};

#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub episodes: Vec<EpisodeRecord>,
    pub env_steps: usize,
}

/// Per-episode summary of an evaluation pass.
#[derive(Clone, Debug, Serialize)]
pub struct EvalEpisode {
    pub family: usize,
    pub n_controlled: usize,
    pub ret: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EvalSummary {
    pub episodes: Vec<EvalEpisode>,
}

impl EvalSummary {
    pub fn mean_return(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.ret).sum::<f64>() / self.episodes.len() as f64
    }

    /// Mean return per family; families never sampled are absent.
    pub fn per_family(&self) -> std::collections::BTreeMap<usize, f64> {
        let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for e in &self.episodes {
            let entry = sums.entry(e.family).or_insert((0.0, 0));
            entry.0 += e.ret;
            entry.1 += 1;
        }
        sums.into_iter()
            .map(|(f, (s, c))| (f, s / c as f64))
            .collect()
    }

    /// Mean return per controlled-subteam size; sizes never sampled are
    /// absent.
    pub fn per_n(&self) -> std::collections::BTreeMap<usize, f64> {
        let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for e in &self.episodes {
            let entry = sums.entry(e.n_controlled).or_insert((0.0, 0));
            entry.0 += e.ret;
            entry.1 += 1;
        }
        sums.into_iter()
            .map(|(f, (s, c))| (f, s / c as f64))
            .collect()
    }
}

/// Run one episode under a fixed composition. Returns the record plus the
/// step-level JSON lines when a dump sink is given.
pub fn run_episode(
    policy: &AnyPolicy,
    env_proto: &TaskEnv,
    composition: &TeamComposition,
    sample: bool,
    mut dump: Option<&mut Vec<serde_json::Value>>,
) -> Result<EpisodeRecord, TrainError> {
    let mut env = env_proto.clone();
    let layout = env.layout();
    let ctx = EpisodeContext {
        seed: composition.episode_seed,
        controlled_slots: composition.controlled_slots.clone(),
        teammate_family: composition.teammate.family_id,
    };
    let mut obs = env.reset(&ctx);
    let mut hist = HistoryBuffer::new(
        policy.history_window(),
        policy.obs_dim(),
        &composition.controlled_slots,
        &obs,
    )?;

    let mut action_rng = derive_rng(composition.episode_seed, "policy-actions", 0);
    let mut mate_rng = derive_rng(
        composition.episode_seed,
        "teammate-noise",
        composition.teammate.instance_seed,
    );

    let n = composition.n_controlled();
    let controlled = &composition.controlled_slots;
    let mut record = EpisodeRecord {
        composition: composition.clone(),
        obs: vec![controlled
            .iter()
            .map(|&s| obs[s].as_slice().to_vec())
            .collect()],
        actions: Vec::new(),
        log_probs: Vec::new(),
        values: Vec::new(),
        rewards: Vec::new(),
        dones: Vec::new(),
        advantages: Vec::new(),
        value_targets: Vec::new(),
    };

    loop {
        let t = env.time();
        let (decoded, value) = policy.act(&hist, sample, &mut action_rng)?;
        debug_assert_eq!(decoded.actions.len(), n);

        let mut joint = vec![0usize; composition.num_agents];
        for (i, &slot) in controlled.iter().enumerate() {
            joint[slot] = decoded.actions[i];
        }
        for &slot in &composition.uncontrolled_slots() {
            joint[slot] = composition
                .teammate
                .act(&layout, &obs[slot], t, &mut mate_rng)?;
        }

        let step = env.step(&joint)?;
        if let Some(sink) = dump.as_deref_mut() {
            sink.push(json!({
                "t": t,
                "state": step.state,
                "observations": step.observations.iter().map(|o| o.as_slice()).collect::<Vec<_>>(),
                "actions": joint,
                "reward": step.reward,
            }));
        }

        record.actions.push(decoded.actions.clone());
        record.log_probs.push(decoded.log_probs.clone());
        record.values.push(value);
        record.rewards.push(step.reward);
        record.dones.push(step.done);

        hist.record_step(&joint, &step.observations)?;
        obs = step.observations;
        record.obs.push(
            controlled
                .iter()
                .map(|&s| obs[s].as_slice().to_vec())
                .collect(),
        );

        if step.done {
            break;
        }
    }
    Ok(record)
}

/// Collect training rollouts: compositions sampled per episode, actions
/// sampled from the policy.
pub fn collect_rollouts(
    policy: &AnyPolicy,
    env_proto: &TaskEnv,
    pool: &TeammatePool,
    n_episodes: usize,
    run_seed: u64,
    episode_offset: u64,
    mut dump: Option<&mut Vec<serde_json::Value>>,
) -> Result<RolloutBuffer, TrainError> {
    let m = env_proto.spec().num_agents;
    let mut buffer = RolloutBuffer::default();
    for e in 0..n_episodes {
        let mut comp_rng: ChaCha8Rng =
            derive_rng(run_seed, "composition", episode_offset + e as u64);
        let comp = sample_composition(m, pool, &mut comp_rng);
        let record = run_episode(policy, env_proto, &comp, true, dump.as_deref_mut())?;
        buffer.env_steps += record.len();
        buffer.episodes.push(record);
    }
    Ok(buffer)
}

/// Greedy evaluation episodes over a pool, same composition sampling as
/// training but a separate seed stream.
pub fn eval_rollouts(
    policy: &AnyPolicy,
    env_proto: &TaskEnv,
    pool: &TeammatePool,
    n_episodes: usize,
    eval_seed: u64,
) -> Result<EvalSummary, TrainError> {
    let m = env_proto.spec().num_agents;
    let mut summary = EvalSummary::default();
    for e in 0..n_episodes {
        let mut comp_rng = derive_rng(eval_seed, "eval-composition", e as u64);
        let comp = sample_composition(m, pool, &mut comp_rng);
        let record = run_episode(policy, env_proto, &comp, false, None)?;
        summary.episodes.push(EvalEpisode {
            family: comp.teammate.family_id,
            n_controlled: comp.n_controlled(),
            ret: record.undiscounted_return(),
        });
    }
    Ok(summary)
}
