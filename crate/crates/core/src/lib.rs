//! A desk-scale laboratory for comparing differentiable approximations
//! of uniform quantization in learned image compression: seven quantizer
//! surrogates, a toy convolutional codec with a factorized prior, a
//! range coder, and the rate-distortion evaluation stack (PSNR, BPP,
//! BD rate) driving the combination-matrix experiments.

pub mod codec;
pub mod coder;
pub mod config;
pub mod data;
pub mod entropy;
pub mod error;
pub mod exp;
pub mod metrics;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
