//! Data-free post-training quantization of neural-network weights.
//!
//! - [`quant`]: uniform asymmetric, uniform symmetric and power-of-two schemes
//! - [`store`]: the f32 model container and the bit-packed quantized format
//! - [`stats`]: per-channel quartiles, histograms, bit-efficiency
//! - [`infer`]: forward pass, evaluation and bit-width sweeps
//! - [`cluster`]: merging confusable classes
//! - [`compress`]: deflate size report
//! - [`shift`]: shift-based integer dense kernel and timing harness
//! - [`fixture`]: seeded synthetic models and datasets

pub mod cli;
pub mod cluster;
pub mod compress;
pub mod error;
pub mod fixture;
pub mod infer;
pub mod quant;
pub mod shift;
pub mod stats;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
