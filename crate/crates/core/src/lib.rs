//! Group knowledge based training for residual networks, on a residual MLP.

pub mod analysis;
mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod knowledge;
pub mod model;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
