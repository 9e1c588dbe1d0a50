//! Cross-modal sequence recognition toolkit: contrastive losses over a shared
//! latent space, latent DTW alignment, class-weighted bin-packing batches,
//! CTC training and n-gram beam-search decoding, and LLM-based N-best rescoring.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod losses;
pub mod parallel;
pub mod alignment;
pub mod sampler;
pub mod alphabet;
pub mod model;
pub mod decoding;
pub mod harness;
pub mod lisa;
