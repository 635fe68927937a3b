//! Smoothness-prior unsupervised semantic segmentation over frozen patch features.
//!
//! The crate learns a projector and a pair of prototype sets (student and EMA teacher)
//! by minimizing a pairwise smoothness energy plus a self-training data term, then scores
//! teacher predictions with Hungarian-matched accuracy and mIoU.
//!
//! Modules, bottom-up:
//!
//! - [`feature_store`]: the `SMSG` binary container for patch features and label maps.
//! - [`synth`]: synthetic features with known ground truth.
//! - [`model`]: projector, prototypes, soft assignments, EMA and `SMCK` checkpoints.
//! - [`objective`]: closeness matrices, label penalty, smoothness/data terms, δ histogram.
//! - [`trainer`]: hand-derived backward pass, Adam and the training loop.
//! - [`evaluator`]: confusion, Hungarian matching, metrics, mini-batch k-means baseline.
//! - [`crf`]: dense-CRF mean-field refinement.
//! - [`cli`]: the workflows behind the `smooseg` binary.

pub mod cli;
pub mod crf;
mod error;
pub mod evaluator;
pub mod feature_store;
pub(crate) mod linalg;
pub mod model;
pub mod objective;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
