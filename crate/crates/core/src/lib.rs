//! Multi-label video classification with learnable pooling.
//!
//! Frame-level features are pooled by trainable NetVLAD or NetFV layers,
//! projected through a ReLU hidden layer and scored by independent
//! sigmoid outputs. Training minimises a pseudo-Huber loss on the
//! probabilities; evaluation uses global average precision over each
//! video's top-N predictions.
//!
//! Module map:
//!
//! - [`featureio`]: record model, binary dataset format, synthetic generator
//! - [`pooling`]: NetVLAD / NetFV forward and backward passes
//! - [`netmodel`]: full classifier, initialisation, size accounting
//! - [`losses`]: pseudo-Huber loss
//! - [`metrics`]: GAP@N and miss analysis
//! - [`schedule`]: exponential learning-rate decay
//! - [`optim`]: Adam and SGD
//! - [`rebalance`]: label statistics and resampled training sets
//! - [`trainer`]: epoch-budgeted training, phases, checkpoints

pub mod error;
pub mod featureio;
pub mod losses;
pub mod metrics;
pub mod netmodel;
pub mod optim;
pub mod pooling;
pub mod rebalance;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
