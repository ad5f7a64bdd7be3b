//! The training loop: batching, augmentation, loss assembly, SGD with
//! Nesterov momentum under a cosine schedule, warm-up gating of the
//! aggregation term, EMA maintenance and per-step metrics.
//!
//! A step is split into three public stages so each can be driven on its
//! own (the gradient checks rebuild the losses around frozen targets):
//!
//! 1. [`prepare_inputs`] augments the batch,
//! 2. [`compute_targets`] derives pseudo-labels, the embedding set and the
//!    aggregated labels from the weak views, without gradient,
//! 3. [`record_losses`] puts the four loss terms on a tape.

mod config;
mod optim;
mod run;
mod step;

pub use config::{ablation_variants, DataConfig, ImbalanceConfig, TrainConfig, WARMUP_FRACTION};
pub use optim::{cosine_lr, sgd_nesterov_step, SgdConfig, Velocity};
pub use run::{train, History, HistoryRow, TrainOutcome, HISTORY_HEADER};
pub use step::{
    compute_targets, gated_weights, prepare_inputs, record_losses, step_rng, train_step, StepInputs, StepMetrics,
    StepTargets, TrainState,
};
