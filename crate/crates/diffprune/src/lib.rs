//! Train, store, and analyze sparse task-specific parameter diffs over a
//! frozen base model.
//!
//! Instead of finetuning a full copy of the base parameters per task, the
//! pipeline learns a diff vector `delta` so the task model is
//! `theta + delta`, and drives `delta` sparse with stochastic Hard-Concrete
//! gates plus an expected-L0 penalty. A magnitude projection then pins the
//! nonzero budget exactly, and a short fixed-mask finetune recovers the last
//! bit of accuracy. Sparse diffs ship as compact position/value files that
//! patch the base checkpoint.
//!
//! Module map:
//! - [`tensor`]: minimal reverse-mode autodiff engine (dense f32, CPU)
//! - [`gates`]: Hard-Concrete gate sampling, closed-form expected L0,
//!   deterministic finalization
//! - [`space`]: flat parameter space with named segments and group partitions
//! - [`reparam`]: the gated diff `delta = z * w` and its composition rules
//! - [`pipeline`]: training loops, projection, baselines, evaluation
//! - [`analysis`]: sparsity reports, storage accounting, sweep tables
//! - [`codec`]: binary formats for diffs and checkpoints
//! - [`model`], [`task`], [`config`]: toy models, synthetic task suite, and
//!   the flat key=value run configuration

pub mod analysis;
pub mod codec;
pub mod config;
pub mod error;
pub mod gates;
pub mod model;
pub mod pipeline;
pub mod reparam;
pub mod space;
pub mod task;
pub mod tensor;

pub use error::{Error, Result};
