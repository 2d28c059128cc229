//! Reflectance-guided few-shot crack segmentation.
//!
//! The pipeline trains episodically on normal-light crack images and
//! segments low-light queries from a handful of annotated supports. Core
//! mechanisms: Retinex-style decomposition of each image into reflectance
//! and illumination, dual support prototypes (image + reflectance) fused by
//! a learned co-attention gate, multi-scale query features via dilated
//! convolutions enriched with reflectance detail, self-support prototype
//! refinement from confident query cells, and cosine matching through a
//! temperature softmax.
//!
//! Module map:
//! - [`data`]: datasets, episodic sampling, augmentation, synthetic imagery
//! - [`retinex`]: reflectance/illumination decomposition
//! - [`network`]: encoders and the dilated-convolution fusion head
//! - [`protonet`]: prototype extraction, fusion, self-support, matching
//! - [`losses`]: segmentation and self-support losses
//! - [`engine`]: training loop, evaluation, ablations, checkpoints
//! - [`cli`]: command-line surface
//! - [`tensor`] / [`gradcheck`]: the autodiff substrate and its oracle

pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod imgmath;
pub mod losses;
pub mod network;
pub mod protonet;
pub mod retinex;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
