//! Self-supervised learning as latent distribution matching.
//!
//! Objectives are assembled from an alignment term, supplied by a
//! [`latentmodels::LatentModel`], and a uniformity term, supplied by an
//! [`entropy::EntropyEstimator`]. Gradients come from the small reverse-mode
//! engine in [`diffcore`].

pub mod cli;
pub mod diffcore;
pub mod entropy;
pub mod error;
pub mod kalman;
pub mod latentmodels;
pub mod metrics;
pub mod objectives;
pub mod synthdata;
pub mod nets;

pub use error::{LdmError, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide deterministic generator.
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
