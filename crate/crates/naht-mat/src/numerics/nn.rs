//! Neural-network building blocks on top of the autodiff graph: linear
//! layers, layer norm with learned affine, the feed-forward sublayer, and
//! masked multi-head attention.

use rand::Rng;

use crate::numerics::graph::GradNode;
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;
use crate::numerics::NumericsError;

/// Layer-norm epsilon used across the model.
pub const LN_EPS: f64 = 1e-5;

/// Mask value added to attention logits at disallowed positions. Large
/// enough to zero the softmax weight, finite so nothing turns into NaN.
pub const MASK_NEG: f64 = -1e30;

/// Xavier-uniform init for a `[fan_in, fan_out]` weight matrix.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

/// `y = x W + b` with `W: [d_in, d_out]`.
pub struct Linear {
    pub w: GradNode,
    pub b: GradNode,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            w: store.add(&format!("{name}.w"), xavier_uniform(d_in, d_out, rng)),
            b: store.add(&format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, x: &GradNode) -> GradNode {
        x.matmul(&self.w).expect("linear shapes").add_row(&self.b)
    }
}

/// Learned affine layer norm.
pub struct LayerNorm {
    pub gain: GradNode,
    pub bias: GradNode,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(&format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, x: &GradNode) -> GradNode {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }
}

/// Two-layer feed-forward sublayer with GELU, hidden width `4 * d_model`.
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            lin1: Linear::new(store, &format!("{name}.l1"), d_model, 4 * d_model, rng),
            lin2: Linear::new(store, &format!("{name}.l2"), 4 * d_model, d_model, rng),
        }
    }

    pub fn forward(&self, x: &GradNode) -> GradNode {
        self.lin2.forward(&self.lin1.forward(x).gelu())
    }
}

/// Projections for one multi-head attention sublayer.
pub struct AttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(NumericsError::HeadSplit { d_model, n_heads });
        }
        Ok(AttentionParams {
            wq: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            wk: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            wv: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            wo: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            n_heads,
            d_model,
        })
    }
}

/// Masked multi-head attention.
///
/// `q` is `[Lq, d]`, `kv` is `[Lk, d]`, and `mask` is `[Lq, Lk]` with 1
/// where query `i` may attend key `j`. Masked positions get [`MASK_NEG`]
/// added to their logits before the softmax. A query row with no allowed
/// key is degenerate and reported as an error.
pub fn multi_head_attention(
    q: &GradNode,
    kv: &GradNode,
    mask: &Tensor,
    params: &AttentionParams,
) -> Result<GradNode, NumericsError> {
    let lq = q.shape()[0];
    let lk = kv.shape()[0];
    if mask.shape() != [lq, lk] {
        return Err(NumericsError::MaskShape {
            expected: vec![lq, lk],
            got: mask.shape().to_vec(),
        });
    }
    for i in 0..lq {
        if mask.row(i).iter().all(|&m| m == 0.0) {
            return Err(NumericsError::FullyMaskedQuery { row: i });
        }
    }

    let additive = mask.map(|m| if m == 0.0 { MASK_NEG } else { 0.0 });
    let d_head = params.d_model / params.n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let q_proj = params.wq.forward(q);
    let k_proj = params.wk.forward(kv);
    let v_proj = params.wv.forward(kv);

    let mut heads = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let qh = q_proj.slice_cols(h * d_head, d_head);
        let kh = k_proj.slice_cols(h * d_head, d_head);
        let vh = v_proj.slice_cols(h * d_head, d_head);
        let scores = qh
            .matmul_nt(&kh)
            .expect("attention score shapes")
            .scale(scale)
            .add_const(&additive);
        let weights = scores.softmax_rows();
        heads.push(weights.matmul(&vh).expect("attention mix shapes"));
    }
    let merged = GradNode::concat_cols(&heads);
    Ok(params.wo.forward(&merged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn single_key_attention_returns_value_projection() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let params = AttentionParams::new(&mut store, "attn", 4, 2, &mut r).unwrap();
        let q = GradNode::leaf(Tensor::from_rows(&[
            vec![0.3, -0.1, 0.8, 0.2],
            vec![-0.5, 0.9, 0.0, 0.4],
        ]));
        let kv = GradNode::leaf(Tensor::from_rows(&[vec![0.7, 0.1, -0.3, 0.5]]));
        let mask = Tensor::full(&[2, 1], 1.0);
        let out = multi_head_attention(&q, &kv, &mask, &params).unwrap();

        // With one key the softmax weight is 1 regardless of the query,
        // so both outputs equal W_o(V-projection of the key).
        let expected = params.wo.forward(&params.wv.forward(&kv)).value();
        for i in 0..2 {
            for j in 0..4 {
                assert!((out.value().at2(i, j) - expected.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_query_rejected() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let params = AttentionParams::new(&mut store, "attn", 4, 2, &mut r).unwrap();
        let q = GradNode::leaf(Tensor::zeros(&[2, 4]));
        let kv = GradNode::leaf(Tensor::zeros(&[3, 4]));
        let mut mask = Tensor::full(&[2, 3], 1.0);
        for v in &mut mask.data_mut()[3..6] {
            *v = 0.0;
        }
        let err = multi_head_attention(&q, &kv, &mask, &params).unwrap_err();
        assert!(matches!(err, NumericsError::FullyMaskedQuery { row: 1 }));
    }

    #[test]
    fn lower_triangular_mask_blocks_future_gradients() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let params = AttentionParams::new(&mut store, "attn", 4, 2, &mut r).unwrap();
        let mut kv_data = Tensor::zeros(&[3, 4]);
        for (i, v) in kv_data.data_mut().iter_mut().enumerate() {
            *v = (i as f64) * 0.1 - 0.5;
        }
        let kv = GradNode::leaf(kv_data);
        let q = kv.clone();
        let mut mask = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            for j in 0..=i {
                mask.data_mut()[i * 3 + j] = 1.0;
            }
        }
        // Loss = sum of output row 0: row 0 may only attend key 0, so
        // gradients w.r.t. kv rows 1 and 2 must be exactly zero.
        let out = multi_head_attention(&q, &kv, &mask, &params).unwrap();
        let loss = out.gather_rows(&[0]).sum_all();
        loss.backward().unwrap();
        let g = kv.grad().unwrap();
        for j in 4..12 {
            assert_eq!(g.data()[j], 0.0);
        }
    }

    #[test]
    fn head_split_must_divide() {
        let mut store = ParamStore::new();
        let mut r = rng();
        assert!(AttentionParams::new(&mut store, "attn", 6, 4, &mut r).is_err());
    }
}
