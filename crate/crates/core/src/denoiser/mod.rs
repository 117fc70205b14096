//! Conditional noise-prediction network with step embeddings and causal masks.

pub mod embedding;
pub mod masks;
pub mod model;

pub use embedding::time_embedding;
pub use masks::{CausalMasks, Conditioning};
pub use model::{DenoiserConfig, DenoiserModel, PreparedConditioning};
