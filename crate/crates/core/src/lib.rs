//! Joint sequence-to-sequence and autoencoder response model whose two latent
//! spaces are fused into one geometry, with hypersphere-sampling inference,
//! multi-reference BLEU evaluation and latent-space diagnostics.

pub mod cli;
pub mod corpus;
pub mod diagnostics;
pub mod inference;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod neural;
pub mod trainer;

pub use error::{Error, Result};
