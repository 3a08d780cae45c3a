//! Entropy-aware on-policy distillation on tabular softmax policies.
//!
//! The crate provides:
//!
//! * [`probdist`] and [`divergence`]: categorical distributions, entropy,
//!   top-k views and exact/truncated KL divergences.
//! * [`objective`]: per-token losses with analytic logit gradients (clipped
//!   reverse-KL surrogate, entropy-gated forward KL, entropy bonus, advantage
//!   shaping, off-policy KD).
//! * [`toylab`]: the context-free toy study of reverse-KL reward instability.
//! * [`synthenv`] and [`trainer`]: a synthetic autoregressive teacher and the
//!   rollout / minibatch training loop for every method variant.
//! * [`analysis`]: entropy histograms, high-entropy retention, forward KL at
//!   high-entropy positions and the top-k mass/memory table.
//!
//! Independent work (seeds, rollouts, per-token losses) runs through
//! [`exec::Execution`], which uses rayon when the `parallel` feature is on.
//! Reductions always happen sequentially in a fixed order, so results are
//! bit-identical in both modes.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod divergence;
pub mod error;
pub mod exec;
pub mod io;
pub mod objective;
pub mod plot;
pub mod probdist;
pub mod seeding;
pub mod synthenv;
pub mod toylab;
pub mod trainer;

pub use error::{EopdError, Result};
pub use exec::Execution;
pub use objective::{LossParams, Method};
pub use probdist::{Categorical, LogitVector, TopKView};
pub use synthenv::{
    EnvConfig, Environment, RolloutBuffer, TabularPolicy, TeacherQuery, Trajectory,
};
pub use toylab::ToyConfig;
pub use trainer::{SweepAxis, TrainConfig, TrainReport};
