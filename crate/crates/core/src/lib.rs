//! Semi-supervised classification with dual-level interaction between the
//! class predictions of a classifier head and the feature embeddings of a
//! projection head.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: dense tensors and a reverse-mode tape
//! - [`data`]: synthetic blobs, labeled/unlabeled splits, imbalanced splits, batching
//! - [`augment`]: weak and strong perturbations of feature vectors
//! - [`model`]: encoder, classifier head, projection head, EMA shadow, checkpoints
//! - [`objective`]: distribution alignment, pseudo-labels, contrastive alignment,
//!   aggregated pseudo-labels and the combined objective
//! - [`trainer`]: the training step and loop, optimizer, LR schedule
//! - [`evaluation`]: test error, pseudo-label diagnostics, multi-seed reports
//!
//! The guide under `book/` walks through each piece with runnable snippets.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// index loops read closer to the matrix notation in numeric code
#![allow(clippy::needless_range_loop)]

pub mod augment;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};
