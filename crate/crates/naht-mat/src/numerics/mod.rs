//! Minimal tensor algebra with reverse-mode automatic differentiation,
//! an Adam optimizer, and a finite-difference gradient checker. All model
//! math is f64 and deterministic: identical inputs and parameters produce
//! bit-identical outputs.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_diff_check, FiniteDiffReport};
pub use graph::{softmax_rows_tensor, GradNode};
pub use nn::{multi_head_attention, AttentionParams, FeedForward, LayerNorm, Linear, LN_EPS};
pub use params::{AdamConfig, ParamStore, CKPT_MAGIC};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },

    #[error("matmul dimension mismatch: lhs {lhs:?} vs rhs {rhs:?}")]
    MatmulDims { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("backward requires a one-element root, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },

    #[error("attention query row {row} is fully masked")]
    FullyMaskedQuery { row: usize },

    #[error("attention mask shape {got:?}, expected {expected:?}")]
    MaskShape { expected: Vec<usize>, got: Vec<usize> },

    #[error("d_model {d_model} not divisible by n_heads {n_heads}")]
    HeadSplit { d_model: usize, n_heads: usize },

    #[error("parameter {name}: checkpoint shape {got:?}, model shape {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
}
