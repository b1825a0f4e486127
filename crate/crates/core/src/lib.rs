//! Cold-start CTR prediction with an ensemble of conditional VAEs that warm
//! new-item embeddings from side information, regularized by a
//! pairwise-distance estimate of epistemic uncertainty over Sinkhorn
//! divergences.

pub mod autograd;
pub mod backbone;
pub mod cvae_ensemble;
pub mod data_pipeline;
pub mod embedding_store;
pub mod error;
pub mod nn;
pub mod seed;
pub mod synthetic;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
