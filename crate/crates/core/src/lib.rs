//! Zero-shot anomaly detection on a toy frozen dual encoder.
//!
//! A frozen transformer pair (image tower with class token, causal text
//! tower) is adapted through hybrid learnable prompts — static tokens plus
//! dynamically generated ones — and a learnable projection layer. Pixel
//! maps come from two-way softmax over patch/text cosine similarities
//! across several hierarchy layers; image scores fuse the most-abnormal
//! cluster centroids into the global embedding before scoring. Training
//! runs on synthetic auxiliary shape data whose categories are disjoint
//! from evaluation, and everything is reproducible bit-for-bit from
//! (config, seed).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hsf;
pub mod localization;
pub mod model;
pub mod pgm;
pub mod prompts;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
