//! The MAT-NAHT architecture: a history-token encoder with learned
//! relative-timestep positional encodings and a joint value head, plus an
//! autoregressive decoder that emits controlled agents' actions in
//! ascending slot order.
//!
//! One token per (controlled agent, in-window timestep). A token is
//! `W_obs·o + E_act[a] + P_δ`; the δ=0 token uses a learned "no action
//! yet" embedding. Tokens carry no slot identity, so the controlled
//! subteam is permutation-equivariant and one parameter set serves every
//! subteam size. The decoder queries the encoder's current-step
//! representations with the decoded-so-far action context, per agent, so
//! agent i's logits depend on actions of agents before i only.

pub mod history;

pub use history::HistoryBuffer;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{
    multi_head_attention, AttentionParams, FeedForward, GradNode, LayerNorm, Linear, NumericsError,
    ParamStore, Tensor,
};
use crate::rng::derive_rng;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub num_actions: usize,
    /// History window length in timesteps.
    pub k: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    /// Largest controlled subteam the config is meant for (M−1); metadata
    /// for describe/validation, not a structural parameter.
    pub max_agents: usize,
}

impl ModelConfig {
    pub fn defaults_for(obs_dim: usize, num_actions: usize, max_agents: usize) -> Self {
        ModelConfig {
            obs_dim,
            num_actions,
            k: 4,
            d_model: 64,
            n_heads: 2,
            n_layers_enc: 2,
            n_layers_dec: 2,
            max_agents,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.obs_dim == 0 || self.num_actions < 2 || self.max_agents == 0 {
            return Err(ModelError::BadConfig(
                "obs_dim, num_actions, max_agents must be positive (num_actions >= 2)".into(),
            ));
        }
        if self.n_layers_enc == 0 || self.n_layers_dec == 0 {
            return Err(ModelError::BadConfig("need at least one layer each".into()));
        }
        Ok(())
    }
}

/// Token matrix plus bookkeeping for one forward pass.
pub struct TokenSequence {
    pub tokens: GradNode,
    /// (controlled-agent index, relative timestep δ) per token row.
    pub meta: Vec<(usize, usize)>,
    /// Row index of each agent's δ=0 token, ascending slot order.
    pub current_indices: Vec<usize>,
    pub n_agents: usize,
}

pub struct EncoderOutput {
    pub reps: GradNode,
    pub current_reps: GradNode,
    pub joint_value: GradNode,
    pub n_agents: usize,
}

impl EncoderOutput {
    pub fn value(&self) -> f64 {
        self.joint_value.item()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub entropy: Vec<f64>,
}

struct EncoderLayer {
    ln1: LayerNorm,
    attn: AttentionParams,
    ln2: LayerNorm,
    ff: FeedForward,
}

struct DecoderLayer {
    ln_stream: LayerNorm,
    self_attn: AttentionParams,
    ln_query: LayerNorm,
    ln_context: LayerNorm,
    cross_attn: AttentionParams,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

pub struct MatNaht {
    pub cfg: ModelConfig,
    store: ParamStore,
    obs_proj: Linear,
    /// `[num_actions + 1, d]`; the extra row is the "no action yet"
    /// embedding used at δ=0.
    enc_act_embed: GradNode,
    /// `[k + 1, d]`, indexed by relative timestep δ.
    pos_embed: GradNode,
    enc_layers: Vec<EncoderLayer>,
    enc_final_ln: LayerNorm,
    value_l1: Linear,
    value_l2: Linear,
    /// `[num_actions + 1, d]`; the extra row is the decoder start token.
    dec_act_embed: GradNode,
    dec_layers: Vec<DecoderLayer>,
    dec_final_ln: LayerNorm,
    action_head: Linear,
}

impl MatNaht {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = derive_rng(seed, "model-init", 0);
        let d = cfg.d_model;
        let a = cfg.num_actions;

        let obs_proj = Linear::new(&mut store, "enc.obs_proj", cfg.obs_dim, d, &mut rng);
        // Position and action embeddings start wide enough that attention
        // can tell timesteps apart from the first updates.
        let mut embed_init = |store: &mut ParamStore, name: &str, rows: usize, scale: f64| {
            let data = (0..rows * d).map(|_| rng.gen_range(-scale..scale)).collect();
            store.add(name, Tensor::new(vec![rows, d], data).expect("embed shape"))
        };
        let enc_act_embed = embed_init(&mut store, "enc.act_embed", a + 1, 0.1);
        let pos_embed = embed_init(&mut store, "enc.pos_embed", cfg.k + 1, 0.5);
        let dec_act_embed = embed_init(&mut store, "dec.act_embed", a + 1, 0.1);

        let mut enc_layers = Vec::with_capacity(cfg.n_layers_enc);
        for l in 0..cfg.n_layers_enc {
            enc_layers.push(EncoderLayer {
                ln1: LayerNorm::new(&mut store, &format!("enc.l{l}.ln1"), d),
                attn: AttentionParams::new(
                    &mut store,
                    &format!("enc.l{l}.attn"),
                    d,
                    cfg.n_heads,
                    &mut rng,
                )?,
                ln2: LayerNorm::new(&mut store, &format!("enc.l{l}.ln2"), d),
                ff: FeedForward::new(&mut store, &format!("enc.l{l}.ff"), d, &mut rng),
            });
        }
        let enc_final_ln = LayerNorm::new(&mut store, "enc.final_ln", d);
        let value_l1 = Linear::new(&mut store, "value.l1", d, d, &mut rng);
        let value_l2 = Linear::new(&mut store, "value.l2", d, 1, &mut rng);

        let mut dec_layers = Vec::with_capacity(cfg.n_layers_dec);
        for l in 0..cfg.n_layers_dec {
            dec_layers.push(DecoderLayer {
                ln_stream: LayerNorm::new(&mut store, &format!("dec.l{l}.ln_stream"), d),
                self_attn: AttentionParams::new(
                    &mut store,
                    &format!("dec.l{l}.self_attn"),
                    d,
                    cfg.n_heads,
                    &mut rng,
                )?,
                ln_query: LayerNorm::new(&mut store, &format!("dec.l{l}.ln_query"), d),
                ln_context: LayerNorm::new(&mut store, &format!("dec.l{l}.ln_context"), d),
                cross_attn: AttentionParams::new(
                    &mut store,
                    &format!("dec.l{l}.cross_attn"),
                    d,
                    cfg.n_heads,
                    &mut rng,
                )?,
                ln_ff: LayerNorm::new(&mut store, &format!("dec.l{l}.ln_ff"), d),
                ff: FeedForward::new(&mut store, &format!("dec.l{l}.ff"), d, &mut rng),
            });
        }
        let dec_final_ln = LayerNorm::new(&mut store, "dec.final_ln", d);
        let action_head = Linear::new(&mut store, "dec.action_head", d, a, &mut rng);

        Ok(MatNaht {
            cfg,
            store,
            obs_proj,
            enc_act_embed,
            pos_embed,
            enc_layers,
            enc_final_ln,
            value_l1,
            value_l2,
            dec_act_embed,
            dec_layers,
            dec_final_ln,
            action_head,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// One token per (controlled agent, in-window timestep), newest last
    /// within each agent's block. Uncontrolled slots are never turned
    /// into tokens; the masking is structural.
    pub fn build_tokens(&self, hist: &HistoryBuffer) -> Result<TokenSequence, ModelError> {
        let n = hist.n_controlled();
        if n == 0 {
            return Err(ModelError::NoControlledAgents);
        }
        let k_valid = hist.valid_len().min(self.cfg.k);
        let per_agent = k_valid + 1;
        let total = n * per_agent;

        let mut obs_rows: Vec<f64> = Vec::with_capacity(total * self.cfg.obs_dim);
        let mut act_ids: Vec<usize> = Vec::with_capacity(total);
        let mut delta_ids: Vec<usize> = Vec::with_capacity(total);
        let mut meta = Vec::with_capacity(total);
        let mut current_indices = Vec::with_capacity(n);

        for agent in 0..n {
            for delta in (1..=k_valid).rev() {
                let (obs, action) = hist.past_entry(agent, delta);
                if obs.len() != self.cfg.obs_dim {
                    return Err(ModelError::ObsDimMismatch {
                        got: obs.len(),
                        expected: self.cfg.obs_dim,
                    });
                }
                obs_rows.extend_from_slice(obs);
                act_ids.push(*action);
                delta_ids.push(delta);
                meta.push((agent, delta));
            }
            let obs = hist.current_obs(agent);
            if obs.len() != self.cfg.obs_dim {
                return Err(ModelError::ObsDimMismatch {
                    got: obs.len(),
                    expected: self.cfg.obs_dim,
                });
            }
            obs_rows.extend_from_slice(obs);
            act_ids.push(self.cfg.num_actions); // "no action yet"
            delta_ids.push(0);
            current_indices.push(meta.len());
            meta.push((agent, 0));
        }

        let obs_matrix = GradNode::leaf(
            Tensor::new(vec![total, self.cfg.obs_dim], obs_rows).expect("token obs shape"),
        );
        let tokens = self
            .obs_proj
            .forward(&obs_matrix)
            .add(&self.enc_act_embed.gather_rows(&act_ids))
            .add(&self.pos_embed.gather_rows(&delta_ids));

        Ok(TokenSequence {
            tokens,
            meta,
            current_indices,
            n_agents: n,
        })
    }

    /// Pre-norm encoder over all tokens (full attention), then a joint
    /// value from the mean of the δ=0 representations.
    pub fn encode(&self, tokens: &TokenSequence) -> Result<EncoderOutput, ModelError> {
        let total = tokens.meta.len();
        let full_mask = Tensor::full(&[total, total], 1.0);
        let mut x = tokens.tokens.clone();
        for layer in &self.enc_layers {
            let normed = layer.ln1.forward(&x);
            let attended = multi_head_attention(&normed, &normed, &full_mask, &layer.attn)?;
            x = x.add(&attended);
            let ff_out = layer.ff.forward(&layer.ln2.forward(&x));
            x = x.add(&ff_out);
        }
        let reps = self.enc_final_ln.forward(&x);
        let current_reps = reps.gather_rows(&tokens.current_indices);
        let pooled = current_reps.mean_axis0();
        let joint_value = self
            .value_l2
            .forward(&self.value_l1.forward(&pooled).gelu());
        Ok(EncoderOutput {
            reps,
            current_reps,
            joint_value,
            n_agents: tokens.n_agents,
        })
    }

    /// Decoder logits for the first `prev_actions.len() + 1` agents given
    /// the actions already decoded. Row i is agent i's logits.
    fn decoder_logits(
        &self,
        enc: &EncoderOutput,
        prev_actions: &[usize],
    ) -> Result<GradNode, ModelError> {
        let positions = prev_actions.len() + 1;
        let mut stream_ids = Vec::with_capacity(positions);
        stream_ids.push(self.cfg.num_actions); // start token
        for &a in prev_actions {
            if a >= self.cfg.num_actions {
                return Err(ModelError::BadAction {
                    action: a,
                    num_actions: self.cfg.num_actions,
                });
            }
            stream_ids.push(a);
        }

        let prefix: Vec<usize> = (0..positions).collect();
        let queries = enc.current_reps.gather_rows(&prefix);

        let mut causal = Tensor::zeros(&[positions, positions]);
        for i in 0..positions {
            for j in 0..=i {
                causal.data_mut()[i * positions + j] = 1.0;
            }
        }

        let mut stream = self.dec_act_embed.gather_rows(&stream_ids);
        for layer in &self.dec_layers {
            let normed = layer.ln_stream.forward(&stream);
            let self_mixed = multi_head_attention(&normed, &normed, &causal, &layer.self_attn)?;
            stream = stream.add(&self_mixed);
            // Current-step representations query the action context; the
            // causal mask keeps agent i blind to actions j >= i.
            let crossed = multi_head_attention(
                &layer.ln_query.forward(&queries),
                &layer.ln_context.forward(&stream),
                &causal,
                &layer.cross_attn,
            )?;
            stream = queries.add(&crossed);
            let ff_out = layer.ff.forward(&layer.ln_ff.forward(&stream));
            stream = stream.add(&ff_out);
        }
        Ok(self.action_head.forward(&self.dec_final_ln.forward(&stream)))
    }

    fn decode_with(
        &self,
        enc: &EncoderOutput,
        mut pick: impl FnMut(&[f64]) -> usize,
    ) -> Result<DecodeResult, ModelError> {
        let n = enc.n_agents;
        let mut actions: Vec<usize> = Vec::with_capacity(n);
        let mut log_probs = Vec::with_capacity(n);
        let mut entropy = Vec::with_capacity(n);
        for i in 0..n {
            let logits = self.decoder_logits(enc, &actions)?;
            let ls = logits.log_softmax_rows();
            let row: Vec<f64> = ls.with_value(|t| t.row(i).to_vec());
            let probs: Vec<f64> = row.iter().map(|&v| v.exp()).collect();
            let action = pick(&probs);
            log_probs.push(row[action]);
            entropy.push(-row.iter().zip(&probs).map(|(l, p)| l * p).sum::<f64>());
            actions.push(action);
        }
        Ok(DecodeResult {
            actions,
            log_probs,
            entropy,
        })
    }

    /// Sample actions sequentially in ascending controlled-slot order.
    pub fn decode_autoregressive(
        &self,
        enc: &EncoderOutput,
        rng: &mut ChaCha8Rng,
    ) -> Result<DecodeResult, ModelError> {
        self.decode_with(enc, |probs| {
            let u: f64 = rng.gen::<f64>();
            let mut cum = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                cum += p;
                if u < cum {
                    return i;
                }
            }
            probs.len() - 1
        })
    }

    /// Greedy decoding: argmax per agent, ties to the lowest index.
    pub fn decode_greedy(&self, enc: &EncoderOutput) -> Result<DecodeResult, ModelError> {
        self.decode_with(enc, |probs| {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        })
    }

    /// Log-probabilities and entropies of given actions under the same
    /// sequential computation as sampling, as graph nodes for training.
    pub fn decode_teacher_forced(
        &self,
        enc: &EncoderOutput,
        actions: &[usize],
    ) -> Result<(GradNode, GradNode), ModelError> {
        let n = enc.n_agents;
        assert_eq!(actions.len(), n, "one action per controlled agent");
        for &a in actions {
            if a >= self.cfg.num_actions {
                return Err(ModelError::BadAction {
                    action: a,
                    num_actions: self.cfg.num_actions,
                });
            }
        }
        let logits = self.decoder_logits(enc, &actions[..n - 1])?;
        let ls = logits.log_softmax_rows();
        let entries: Vec<(usize, usize)> = actions.iter().copied().enumerate().collect();
        let log_probs = ls.select_entries(&entries);
        let entropy = ls.exp().mul(&ls).sum_rows().scale(-1.0);
        Ok((log_probs, entropy))
    }

    /// Layer shapes and parameter counts, one line per parameter.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "MAT-NAHT: d_model={} heads={} enc_layers={} dec_layers={} k={} obs_dim={} actions={} max_agents={}\n",
            self.cfg.d_model,
            self.cfg.n_heads,
            self.cfg.n_layers_enc,
            self.cfg.n_layers_dec,
            self.cfg.k,
            self.cfg.obs_dim,
            self.cfg.num_actions,
            self.cfg.max_agents,
        ));
        for (name, node) in self.store.iter() {
            out.push_str(&format!("  {:32} {:?}\n", name, node.shape()));
        }
        out.push_str(&format!("total parameters: {}\n", self.store.num_scalars()));
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("no controlled agents in this episode")]
    NoControlledAgents,

    #[error("observation has {got} features, model expects {expected}")]
    ObsDimMismatch { got: usize, expected: usize },

    #[error("action {action} out of range [0, {num_actions})")]
    BadAction { action: usize, num_actions: usize },

    #[error("invalid model config: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Observation;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            obs_dim: 3,
            num_actions: 4,
            k: 3,
            d_model: 8,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            max_agents: 2,
        }
    }

    fn obs(vals: &[f64]) -> Observation {
        Observation(vals.to_vec())
    }

    fn hist_with_steps(k: usize, steps: usize) -> HistoryBuffer {
        let init = vec![
            obs(&[0.1, 0.2, 0.3]),
            obs(&[0.4, 0.5, 0.6]),
            obs(&[9.0, 9.0, 9.0]),
        ];
        let mut hist = HistoryBuffer::new(k, 3, &[0, 1], &init).unwrap();
        for t in 0..steps {
            let x = t as f64 * 0.1;
            let next = vec![
                obs(&[x, 0.2, 0.3]),
                obs(&[x, 0.5, 0.6]),
                obs(&[7.0, 7.0, 7.0]),
            ];
            hist.record_step(&[t % 4, (t + 1) % 4, 3], &next).unwrap();
        }
        hist
    }

    #[test]
    fn token_counts_match_window() {
        let model = MatNaht::new(tiny_cfg(), 0).unwrap();
        // t=0: no history yet, one token per agent.
        let t0 = model.build_tokens(&hist_with_steps(3, 0)).unwrap();
        assert_eq!(t0.meta.len(), 2);
        assert!(t0.meta.iter().all(|&(_, d)| d == 0));
        // k=3 at t>=3: 2 agents x 4 tokens.
        let t3 = model.build_tokens(&hist_with_steps(3, 5)).unwrap();
        assert_eq!(t3.meta.len(), 8);
        assert_eq!(t3.current_indices, vec![3, 7]);
    }

    #[test]
    fn zero_weights_value_is_head_bias() {
        let mut cfg = tiny_cfg();
        cfg.k = 0;
        cfg.max_agents = 1;
        let model = MatNaht::new(cfg, 0).unwrap();
        model.store().set_all_zero();
        model
            .store()
            .get("value.l2.b")
            .unwrap()
            .set_value(Tensor::new(vec![1], vec![0.73]).unwrap());

        let init = vec![obs(&[0.3, -0.4, 0.9]), obs(&[0.0, 0.0, 0.0])];
        let hist = HistoryBuffer::new(0, 3, &[0], &init).unwrap();
        let enc = model.encode(&model.build_tokens(&hist).unwrap()).unwrap();
        assert_eq!(enc.value(), 0.73);
    }

    #[test]
    fn zero_weights_policy_is_uniform() {
        let model = MatNaht::new(tiny_cfg(), 0).unwrap();
        model.store().set_all_zero();
        let hist = hist_with_steps(3, 2);
        let enc = model.encode(&model.build_tokens(&hist).unwrap()).unwrap();
        let (logps, _) = model.decode_teacher_forced(&enc, &[1, 2]).unwrap();
        for v in logps.value().data() {
            assert!((v - (1.0f64 / 4.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_agent_contents_permutes_reps_and_keeps_value() {
        let model = MatNaht::new(tiny_cfg(), 3).unwrap();
        let init_ab = vec![
            obs(&[0.1, 0.9, -0.3]),
            obs(&[-0.7, 0.2, 0.5]),
            obs(&[0.0; 3]),
        ];
        let init_ba = vec![
            obs(&[-0.7, 0.2, 0.5]),
            obs(&[0.1, 0.9, -0.3]),
            obs(&[0.0; 3]),
        ];
        let mut h_ab = HistoryBuffer::new(2, 3, &[0, 1], &init_ab).unwrap();
        let mut h_ba = HistoryBuffer::new(2, 3, &[0, 1], &init_ba).unwrap();
        h_ab.record_step(&[1, 2, 0], &init_ab).unwrap();
        h_ba.record_step(&[2, 1, 0], &init_ba).unwrap();

        let enc_ab = model.encode(&model.build_tokens(&h_ab).unwrap()).unwrap();
        let enc_ba = model.encode(&model.build_tokens(&h_ba).unwrap()).unwrap();

        // Equivariance is structural; summation order inside attention
        // changes with the token order, so compare to rounding error.
        let close = |x: &[f64], y: &[f64]| {
            x.iter().zip(y).all(|(a, b)| (a - b).abs() < 1e-12)
        };
        let ab = enc_ab.current_reps.value();
        let ba = enc_ba.current_reps.value();
        assert!(close(ab.row(0), ba.row(1)));
        assert!(close(ab.row(1), ba.row(0)));
        assert!((enc_ab.value() - enc_ba.value()).abs() < 1e-12);
    }

    #[test]
    fn teacher_forcing_matches_autoregressive_logps() {
        let model = MatNaht::new(tiny_cfg(), 5).unwrap();
        let hist = hist_with_steps(3, 4);
        let enc = model.encode(&model.build_tokens(&hist).unwrap()).unwrap();
        let mut rng = derive_rng(0, "decode", 0);
        for _ in 0..20 {
            let rollout = model.decode_autoregressive(&enc, &mut rng).unwrap();
            let (logps, ents) = model.decode_teacher_forced(&enc, &rollout.actions).unwrap();
            for (a, b) in rollout.log_probs.iter().zip(logps.value().data()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
            for (a, b) in rollout.entropy.iter().zip(ents.value().data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn later_actions_cannot_move_earlier_logits() {
        let mut cfg = tiny_cfg();
        cfg.max_agents = 3;
        let model = MatNaht::new(cfg, 9).unwrap();
        let init = vec![
            obs(&[0.1, 0.2, 0.3]),
            obs(&[0.4, 0.5, 0.6]),
            obs(&[0.7, 0.8, 0.9]),
            obs(&[0.0; 3]),
        ];
        let hist = HistoryBuffer::new(3, 3, &[0, 1, 2], &init).unwrap();
        let enc = model.encode(&model.build_tokens(&hist).unwrap()).unwrap();

        // Vary the *later* teacher-forced actions; rows up to each agent
        // index must stay bit-identical.
        let base = model.decoder_logits(&enc, &[0, 0]).unwrap().value();
        for a1 in 0..4 {
            for a2 in 0..4 {
                let alt = model.decoder_logits(&enc, &[0, a2]).unwrap().value();
                assert_eq!(base.row(0), alt.row(0), "agent 0 must ignore a1/a2");
                assert_eq!(base.row(1), alt.row(1), "agent 1 must ignore a2");
                let alt2 = model.decoder_logits(&enc, &[a1, a2]).unwrap().value();
                assert_eq!(base.row(0), alt2.row(0));
            }
        }
    }

    #[test]
    fn joint_distribution_sums_to_one() {
        let mut cfg = tiny_cfg();
        cfg.num_actions = 3;
        let model = MatNaht::new(cfg, 11).unwrap();
        let init = vec![obs(&[0.1, 0.2, 0.3]), obs(&[0.4, 0.5, 0.6]), obs(&[0.0; 3])];
        let mut hist = HistoryBuffer::new(3, 3, &[0, 1], &init).unwrap();
        hist.record_step(&[1, 2, 0], &init).unwrap();
        let enc = model.encode(&model.build_tokens(&hist).unwrap()).unwrap();

        let mut total = 0.0;
        for a0 in 0..3 {
            for a1 in 0..3 {
                let (logps, _) = model.decode_teacher_forced(&enc, &[a0, a1]).unwrap();
                total += logps.value().data().iter().sum::<f64>().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "joint mass {total}");
    }

    #[test]
    fn single_agent_decodes_from_start_token_only() {
        let cfg = tiny_cfg();
        let model = MatNaht::new(cfg, 2).unwrap();
        let init = vec![obs(&[0.2, -0.1, 0.8]), obs(&[0.0; 3]), obs(&[0.0; 3])];
        let hist = HistoryBuffer::new(3, 3, &[0], &init).unwrap();
        let enc = model.encode(&model.build_tokens(&hist).unwrap()).unwrap();
        let greedy = model.decode_greedy(&enc).unwrap();
        assert_eq!(greedy.actions.len(), 1);
        assert!(greedy.entropy[0] >= 0.0);
        let (logps, _) = model.decode_teacher_forced(&enc, &greedy.actions).unwrap();
        assert!((logps.value().data()[0] - greedy.log_probs[0]).abs() < 1e-12);
    }

    #[test]
    fn history_older_than_window_is_invisible() {
        let model = MatNaht::new(tiny_cfg(), 7).unwrap();
        // Two histories identical in the last k steps but different
        // before: outputs must be bit-identical.
        let mk = |early: f64| {
            let init = vec![
                obs(&[early, 0.0, 0.0]),
                obs(&[early, 1.0, 0.0]),
                obs(&[0.0; 3]),
            ];
            let mut h = HistoryBuffer::new(3, 3, &[0, 1], &init).unwrap();
            for t in 0..5 {
                let x = t as f64 * 0.25;
                let next = vec![obs(&[x, 0.2, 0.3]), obs(&[x, 0.5, 0.6]), obs(&[0.0; 3])];
                h.record_step(&[t % 4, (t + 1) % 4, 3], &next).unwrap();
            }
            h
        };
        let enc_a = model.encode(&model.build_tokens(&mk(0.123)).unwrap()).unwrap();
        let enc_b = model.encode(&model.build_tokens(&mk(-55.0)).unwrap()).unwrap();
        assert_eq!(enc_a.reps.value(), enc_b.reps.value());
        assert_eq!(enc_a.value(), enc_b.value());
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::numerics::finite_diff_check;
        let mut cfg = tiny_cfg();
        cfg.d_model = 16;
        cfg.k = 2;
        let model = MatNaht::new(cfg, 13).unwrap();
        let hist = hist_with_steps(2, 3);
        let mut rng = derive_rng(1, "gradcheck", 0);
        let report = finite_diff_check(
            model.store(),
            || {
                let enc = model.encode(&model.build_tokens(&hist).unwrap()).unwrap();
                let (logps, ents) = model.decode_teacher_forced(&enc, &[1, 3]).unwrap();
                logps
                    .sum_all()
                    .add(&enc.joint_value.mul(&enc.joint_value).sum_all())
                    .add(&ents.sum_all().scale(0.37))
            },
            160,
            1e-5,
            1e-4,
            &mut rng,
        )
        .unwrap();
        assert!(
            report.passed(),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
