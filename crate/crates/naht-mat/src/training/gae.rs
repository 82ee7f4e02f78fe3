//! Generalized advantage estimation.

use crate::training::RolloutBuffer;

/// Direct-sum definition Â_t = Σ_l (γλ)^l δ_{t+l}, O(T²). This is the
/// independent oracle the recursive pass is checked against.
pub fn gae_direct_sum(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let t_max = rewards.len();
    let delta = |t: usize| {
        let next_v = if dones[t] || t + 1 == t_max {
            0.0
        } else {
            values[t + 1]
        };
        rewards[t] + gamma * next_v - values[t]
    };
    let mut out = vec![0.0; t_max];
    for t in 0..t_max {
        let mut acc = 0.0;
        let mut coeff = 1.0;
        for l in 0..t_max - t {
            acc += coeff * delta(t + l);
            if dones[t + l] {
                break;
            }
            coeff *= gamma * lambda;
        }
        out[t] = acc;
    }
    out
}

/// Recursive GAE over every episode, then batch-wide advantage
/// normalization. Value targets are raw advantage plus value (computed
/// before normalization). Terminal bootstrap value is zero.
pub fn compute_gae(buffer: &mut RolloutBuffer, gamma: f64, lambda: f64) {
    let mut all: Vec<f64> = Vec::new();
    for ep in &mut buffer.episodes {
        let t_max = ep.len();
        let mut adv = vec![0.0; t_max];
        let mut running = 0.0;
        for t in (0..t_max).rev() {
            let not_done = if ep.dones[t] { 0.0 } else { 1.0 };
            let next_v = if ep.dones[t] || t + 1 == t_max {
                0.0
            } else {
                ep.values[t + 1]
            };
            let delta = ep.rewards[t] + gamma * next_v - ep.values[t];
            running = delta + gamma * lambda * not_done * running;
            adv[t] = running;
        }

        #[cfg(debug_assertions)]
        {
            let direct = gae_direct_sum(&ep.rewards, &ep.values, &ep.dones, gamma, lambda);
            for (a, d) in adv.iter().zip(&direct) {
                debug_assert!(
                    (a - d).abs() <= 1e-12,
                    "recursive GAE {a} deviates from direct sum {d}"
                );
            }
        }

        ep.value_targets = adv
            .iter()
            .zip(&ep.values)
            .map(|(a, v)| a + v)
            .collect();
        all.extend_from_slice(&adv);
        ep.advantages = adv;
    }

    if all.len() > 1 {
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let denom = var.sqrt() + 1e-8;
        for ep in &mut buffer.episodes {
            for a in &mut ep.advantages {
                *a = (*a - mean) / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::TeamComposition;
    use crate::teammates::TeammateInstance;
    use crate::training::EpisodeRecord;
    use rand::Rng;

    fn episode(rewards: Vec<f64>, values: Vec<f64>) -> EpisodeRecord {
        let t = rewards.len();
        let mut dones = vec![false; t];
        dones[t - 1] = true;
        EpisodeRecord {
            composition: TeamComposition {
                num_agents: 2,
                controlled_slots: vec![0],
                teammate: TeammateInstance::canonical(0),
                episode_seed: 0,
            },
            obs: vec![vec![vec![0.0]]; t + 1],
            actions: vec![vec![0]; t],
            log_probs: vec![vec![0.0]; t],
            values,
            rewards,
            dones,
            advantages: Vec::new(),
            value_targets: Vec::new(),
        }
    }

    #[test]
    fn lambda_zero_collapses_to_td_error() {
        let rewards = vec![1.0, 0.0, 0.5];
        let values = vec![0.2, 0.4, 0.1];
        let adv = gae_direct_sum(&rewards, &values, &[false, false, true], 0.9, 0.0);
        let expected = [
            1.0 + 0.9 * 0.4 - 0.2,
            0.0 + 0.9 * 0.1 - 0.4,
            0.5 - 0.1,
        ];
        for (a, e) in adv.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_lambda_one_with_zero_values_telescopes_to_reward_tails() {
        let rewards = vec![1.0, 0.0, 1.0, 0.25];
        let values = vec![0.0; 4];
        let adv = gae_direct_sum(&rewards, &values, &[false, false, false, true], 1.0, 1.0);
        let expected = [2.25, 1.25, 1.25, 0.25];
        for (a, e) in adv.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn worked_example_recursion_matches_direct_sum() {
        let rewards = vec![1.0, 0.0, 1.0];
        let values = vec![0.5, 0.5, 0.5];
        let mut buffer = RolloutBuffer {
            episodes: vec![episode(rewards.clone(), values.clone())],
            env_steps: 3,
        };
        compute_gae(&mut buffer, 0.9, 0.8);
        let direct = gae_direct_sum(&rewards, &values, &[false, false, true], 0.9, 0.8);
        // One episode batch: compare the *unnormalized* targets path.
        for (t, d) in direct.iter().enumerate() {
            let target = buffer.episodes[0].value_targets[t];
            assert!((target - (d + values[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn random_episodes_recursion_equals_direct_sum() {
        let mut rng = crate::rng::derive_rng(0, "gae-prop", 0);
        for _ in 0..300 {
            let t = rng.gen_range(1..=16);
            let rewards: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let gamma: f64 = rng.gen_range(0.0..=1.0);
            let lambda: f64 = rng.gen_range(0.0..=1.0);
            let mut buffer = RolloutBuffer {
                episodes: vec![episode(rewards.clone(), values.clone())],
                env_steps: t,
            };
            compute_gae(&mut buffer, gamma, lambda);
            let direct = gae_direct_sum(
                &rewards,
                &values,
                &buffer.episodes[0].dones.clone(),
                gamma,
                lambda,
            );
            for (t_idx, d) in direct.iter().enumerate() {
                let target = buffer.episodes[0].value_targets[t_idx];
                assert!(
                    (target - (d + values[t_idx])).abs() <= 1e-12,
                    "t={t_idx} target {target} direct {d}"
                );
            }
        }
    }

    #[test]
    fn batch_advantages_are_normalized() {
        let mut rng = crate::rng::derive_rng(1, "gae-norm", 0);
        let episodes: Vec<EpisodeRecord> = (0..8)
            .map(|_| {
                let t = rng.gen_range(2..10);
                episode(
                    (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let steps = episodes.iter().map(|e| e.len()).sum();
        let mut buffer = RolloutBuffer {
            episodes,
            env_steps: steps,
        };
        compute_gae(&mut buffer, 0.99, 0.95);
        let all: Vec<f64> = buffer
            .episodes
            .iter()
            .flat_map(|e| e.advantages.iter().copied())
            .collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-9, "mean {mean}");
        assert!((std - 1.0).abs() <= 1e-6, "std {std}");
    }
}
