//! Multi-task deep metric learning for person re-identification.
//!
//! A shared two-stage convolutional trunk feeds a triplet-ranking embedding
//! head and a pair-classification head operating on joint (channel-stacked)
//! feature maps. A cross-domain mode couples a source-domain and a
//! target-domain network through a contrastive loss on the classification
//! head's second fully connected layer.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod network;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

/// Environment variable capping internal parallelism.
pub const THREADS_ENV: &str = "MTDNET_THREADS";

/// Worker threads allowed by `MTDNET_THREADS` (default 1). Unparsable or
/// zero values fall back to 1.
pub fn max_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
