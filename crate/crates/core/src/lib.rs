//! Cell-based neural architecture search scored by a contrastive
//! self-supervised objective and driven by sequential model-based
//! optimization with a tree-structured Parzen estimator.
//!
//! The crate splits into:
//! - [`space`]: the categorical cell encoding, its DAG decoding, and exact
//!   search-space accounting;
//! - [`contrastive`]: the noise-contrastive estimator, per-sample losses,
//!   and the momentum memory bank;
//! - [`data`]: CIFAR-10 binary ingestion, the stochastic view pipeline, and
//!   synthetic fixtures;
//! - [`encoder`]: small trainable instantiations of a genotype with manual
//!   gradients and momentum SGD;
//! - [`tpe`]: the Parzen-estimator optimizer and the SMBO loop;
//! - [`search`]: evaluators, run orchestration, and the run-directory
//!   layout.

pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod rng;
pub mod search;
pub mod space;
pub mod tpe;

pub use error::{Error, Result};
