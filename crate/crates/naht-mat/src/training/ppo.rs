//! The clipped-surrogate PPO update over whole-episode minibatches.
//!
//! The joint, history-conditioned advantage of a step is shared by all of
//! the episode's controlled agents at that step; ratios and the clipped
//! minimum are per agent. Teacher-forced passes rebuild tokens from the
//! stored controlled histories rather than caching encoder state.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::model::HistoryBuffer;
use crate::numerics::{AdamConfig, GradNode, Tensor};
use crate::training::{AnyPolicy, PPOConfig, RolloutBuffer, TrainError};

#[derive(Clone, Debug, Default)]
pub struct LossReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub updates: usize,
    /// max |ρ − 1| observed before the first parameter update (the
    /// ratio-one identity: recomputed log-probs equal the behavior ones).
    pub first_epoch_max_ratio_dev: f64,
}

/// The clipped-surrogate objective of one minibatch, built as a graph.
pub struct MinibatchLoss {
    pub total: GradNode,
    pub policy_loss: GradNode,
    pub value_loss: GradNode,
    pub entropy: GradNode,
    /// max |ρ − 1| across the minibatch's agent-steps.
    pub max_ratio_dev: f64,
}

/// Build the PPO loss over whole episodes: teacher-forced log-probs,
/// per-agent clipped ratios sharing the step's joint advantage, squared
/// value error against the GAE targets, and an entropy bonus.
pub fn minibatch_loss(
    policy: &AnyPolicy,
    episodes: &[&crate::training::EpisodeRecord],
    cfg: &PPOConfig,
) -> Result<MinibatchLoss, TrainError> {
    let mut policy_terms: Vec<GradNode> = Vec::new();
    let mut value_terms: Vec<GradNode> = Vec::new();
    let mut entropy_terms: Vec<GradNode> = Vec::new();
    let mut agent_steps = 0usize;
    let mut steps = 0usize;
    let mut max_ratio_dev = 0.0f64;

    for ep in episodes {
        assert_eq!(
            ep.advantages.len(),
            ep.len(),
            "advantages must be computed before the update"
        );
        let n = ep.composition.n_controlled();
        let mut hist =
            HistoryBuffer::from_controlled(policy.history_window(), policy.obs_dim(), &ep.obs[0]);
        for t in 0..ep.len() {
            let (logps, ents, value) = policy.evaluate_actions(&hist, &ep.actions[t])?;

            let neg_old = Tensor::new(vec![n], ep.log_probs[t].iter().map(|lp| -lp).collect())
                .expect("old logp shape");
            let ratio = logps.add_const(&neg_old).exp();
            ratio.with_value(|r| {
                for v in r.data() {
                    max_ratio_dev = max_ratio_dev.max((v - 1.0).abs());
                }
            });
            let adv = ep.advantages[t];
            let surrogate = ratio
                .scale(adv)
                .minimum(&ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip).scale(adv));
            policy_terms.push(surrogate.sum_all());

            let err = value.add_const(&Tensor::full(&[1, 1], -ep.value_targets[t]));
            value_terms.push(err.mul(&err).sum_all());

            entropy_terms.push(ents.sum_all());
            agent_steps += n;
            steps += 1;

            if t + 1 < ep.len() {
                hist.record_controlled(&ep.actions[t], &ep.obs[t + 1]);
            }
        }
    }

    let policy_loss = GradNode::sum_list(&policy_terms).scale(-1.0 / agent_steps as f64);
    let value_loss = GradNode::sum_list(&value_terms).scale(1.0 / steps as f64);
    let entropy = GradNode::sum_list(&entropy_terms).scale(1.0 / agent_steps as f64);
    let total = policy_loss
        .add(&value_loss.scale(cfg.value_coef))
        .add(&entropy.scale(-cfg.entropy_coef));

    Ok(MinibatchLoss {
        total,
        policy_loss,
        value_loss,
        entropy,
        max_ratio_dev,
    })
}

/// Run `cfg.epochs` passes of minibatched updates over the buffer.
/// Advantages must be populated.
pub fn ppo_update(
    policy: &mut AnyPolicy,
    buffer: &RolloutBuffer,
    cfg: &PPOConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport, TrainError> {
    ppo_update_at(policy, buffer, cfg, 0.0, rng)
}

/// `progress` is the fraction of the step budget already consumed; with
/// `lr_anneal` the learning rate decays linearly to zero across it.
pub fn ppo_update_at(
    policy: &mut AnyPolicy,
    buffer: &RolloutBuffer,
    cfg: &PPOConfig,
    progress: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport, TrainError> {
    let mut report = LossReport::default();
    let lr = if cfg.lr_anneal {
        cfg.lr * (1.0 - progress.clamp(0.0, 1.0))
    } else {
        cfg.lr
    };
    let adam = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..buffer.episodes.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_episodes) {
            let episodes: Vec<&crate::training::EpisodeRecord> =
                chunk.iter().map(|&i| &buffer.episodes[i]).collect();
            let loss = minibatch_loss(policy, &episodes, cfg)?;
            if epoch == 0 && report.updates == 0 {
                report.first_epoch_max_ratio_dev = loss.max_ratio_dev;
            }

            let (p, v, e, t) = (
                loss.policy_loss.item(),
                loss.value_loss.item(),
                loss.entropy.item(),
                loss.total.item(),
            );
            if !t.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    policy: p,
                    value: v,
                    entropy: e,
                    diagnostic: format!("epoch {epoch}, episodes {chunk:?}"),
                });
            }

            policy.store().zero_grads();
            loss.total.backward()?;
            let norm = policy.store().clip_grad_norm(cfg.max_grad_norm);
            policy.store_mut().adam_step(&adam);
            policy.store().zero_grads();

            report.policy_loss += p;
            report.value_loss += v;
            report.entropy += e;
            report.grad_norm += norm;
            report.updates += 1;
        }
    }

    if report.updates > 0 {
        let inv = 1.0 / report.updates as f64;
        report.policy_loss *= inv;
        report.value_loss *= inv;
        report.entropy *= inv;
        report.grad_norm *= inv;
    }
    Ok(report)
}
