//! Weakly supervised slide classification with attention-based multiple
//! instance learning, segment-aware group tokens, group-proportional
//! masking and pseudo-bag / consistency regularization.
//!
//! The pipeline, in module order:
//!
//! - [`bag`]: slide bags, validation and the augmented token bag.
//! - [`group`]: one mean-pooled token per segment.
//! - [`masking`]: area-aware masking plans.
//! - [`engine`]: the attention-MIL network with a hand-written backward pass.
//! - [`regularizers`]: pseudo-bags and attention consistency.
//! - [`trainer`]: Adam, the training loop and early stopping.
//! - [`metrics`]: AUC and threshold metrics.
//! - [`io`], [`synth`]: on-disk formats and a synthetic generator.
//! - [`cv`], [`bench`]: cross-validation and ablation grids.

pub mod bag;
pub mod bench;
pub mod cv;
pub mod engine;
pub mod error;
pub mod group;
pub mod io;
pub mod masking;
pub mod metrics;
pub mod regularizers;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
