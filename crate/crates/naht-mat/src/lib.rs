//! MAT-NAHT: a centralized, history-conditioned encoder-decoder
//! transformer that controls a per-episode-varying subteam of agents
//! cooperating with scripted, unknown teammates.
//!
//! The crate is organized bottom-up:
//! - [`numerics`]: f64 tensors, reverse-mode autodiff, Adam, checkpoints.
//! - [`envs`]: Dec-POMDP toy tasks with exactly computable oracles.
//! - [`teammates`]: scripted uncontrolled-teammate families and pools.
//! - [`sampler`]: the per-episode team sampling process.
//! - [`model`]: the encoder-decoder policy/value network.
//! - [`training`]: PPO with GAE over per-episode team compositions.
//! - [`harness`]: experiment configuration, CLI, evaluation, plot data.

pub mod envs;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sampler;
pub mod teammates;
pub mod training;
