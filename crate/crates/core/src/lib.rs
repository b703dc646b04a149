//! Multi-modal queried object detection at desk scale.
//!
//! A small language-queried detector ([`detector`]) is extended with gated
//! class-scalable perceiver layers ([`gcp`]) that enrich each category's
//! text token with vision queries drawn from a per-category bank
//! ([`query_bank`]). Only the GCP layers are trained on top of the frozen
//! detector ([`modulation`]), with present categories randomly replaced by
//! a `[MASK]` token so that predictions must come from the vision queries.

pub mod autograd;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gcp;
pub mod modulation;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod query_bank;
pub mod raster;
pub mod synth;

pub use config::{FreezeMode, GateVariant, ModelConfig, PretrainConfig, TrainConfig};
pub use error::{Error, Result};
