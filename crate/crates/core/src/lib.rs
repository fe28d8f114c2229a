//! Coarse-to-fine image captioning with stacked spatial attention, trained by
//! cross-entropy and then by multi-stage REINFORCE with relative rewards.
//!
//! Everything runs on a small reverse-mode autodiff tape over `f64` matrices
//! ([`tape`]), so training is deterministic for a given seed.

pub mod attention;
pub mod beam;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
