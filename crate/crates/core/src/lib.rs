//! Learned KV-cache eviction with retention gates.
//!
//! A small decoder-only transformer is trained as a teacher, frozen, and given
//! per-layer retention gates that score every token once at creation time.
//! During training the scores damp attention logits by `β^(t−i)`; at inference
//! they decide which cached token to drop when the cache exceeds its budget.

pub mod analysis;
pub mod attnkern;
pub mod cache;
pub mod error;
pub mod gates;
pub mod losses;
pub mod model;
pub mod numkern;
pub mod tasks;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use gates::{GateConfig, GateParams, GateVariant, RetentionScores};
pub use losses::{KlDirection, LossReport};
pub use model::{ForwardOutput, Model, ModelConfig, ModelWeights};
pub use numkern::{Precision, Real, Tensor};
