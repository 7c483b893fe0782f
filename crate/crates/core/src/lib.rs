//! Inpainting with a pixel-constrained autoregressive model: a masked gated
//! prior network plus a conditioning network over the visible pixels, with
//! exact sampling and likelihoods.

pub mod data;
mod error;
pub mod maskgen;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod sampling;
pub mod training;

pub use error::{CoreError, Result};
