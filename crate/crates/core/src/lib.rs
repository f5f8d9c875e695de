//! Multi-temporal change perception model: toy encoder, change-enhanced
//! attention, change-query decoding, a small language model with a local
//! causal mask, and the two-stage training loop.

pub mod changeseg;
pub mod config;
pub mod encoder;
pub mod error;
pub mod lca;
pub mod lm;
pub mod losses;
pub mod model;
pub mod params;
pub mod train;
pub mod vcp;

pub use config::{Mechanisms, ModelConfig};
pub use error::{ModelError, Result};
pub use params::{Ctx, ParamStore};
