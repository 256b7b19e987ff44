//! Multi-positive contrastive representation learning on caption-grouped
//! synthetic samples.
//!
//! The crate is organized as a pipeline:
//!
//! - [`gen`]: a toy text-to-sample generator. Variance-preserving diffusion
//!   over a low-dimensional feature space with closed-form scores, sampled by
//!   deterministic DDIM under classifier-free guidance.
//! - [`data`]: caption handling, generation budgets, feature-space
//!   augmentation and the `n` captions x `m` samples batch sampler.
//! - [`objective`]: the multi-positive contrastive loss with analytic
//!   gradients, its single-positive reduction and the image/text pair loss.
//! - [`model`]: a small encoder (MLP or tiny transformer backbone) with a
//!   batch-normalized projection head and an exact backward pass.
//! - [`train`]: AdamW, warmup + cosine schedule, SimCLR-equivalent epoch
//!   accounting, checkpoints.
//! - [`eval`]: L-BFGS logistic-regression linear probe, episodic few-shot
//!   evaluation and report rendering.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod gen;
pub mod io;
pub mod model;
pub mod objective;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use ndarray;

/// Version of this crate, recorded in run provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
