//! Channel and region attention for visual question answering, built on a
//! small reverse-mode differentiation engine.
//!
//! A question is encoded by a GRU, the image is a `K×D` matrix of region
//! features, and one of four attention pipelines ([`attention::Variant`])
//! reduces the regions to a single `D`-vector that the classifier combines
//! with the question to score answers.

pub mod attention;
pub mod classifier;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
