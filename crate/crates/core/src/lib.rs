//! Metric-learning training engine built around global proxy-based hard
//! mining: an auxiliary proxy head produces compact per-place descriptors
//! that are cached in a memory bank and indexed once per epoch to assemble
//! mini-batches of mutually similar places, keeping pair- and triplet-based
//! losses supplied with informative examples.
//!
//! Modules:
//! - [`numerics`]: dense matrices, SGD with momentum, gradient checking
//! - [`model`]: encoder + proxy head with manual backprop and checkpoints
//! - [`losses`]: triplet / contrastive / multi-similarity with OHM and
//!   informative-fraction statistics
//! - [`sampler`]: proxy averaging, memory bank, epoch-boundary batch plans
//! - [`dataset`]: synthetic place datasets and eval splits
//! - [`eval`]: recall@K and cache-cost reporting
//! - [`train`]: the full training loop
//! - [`config`]: flat-key run configuration and presets

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod train;

pub use config::{Preset, RunConfig};
pub use error::{Error, Result};
pub use sampler::PlaceId;
