//! Disentangled cascading graph convolution for multi-behavior
//! recommendation.

pub mod attention;
pub mod dataset;
pub mod disentangle;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod meta;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
