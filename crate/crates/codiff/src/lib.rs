//! Compression-aware one-step diffusion pipeline for JPEG artifact removal.
//!
//! The pipeline has three training stages: a small latent autoencoder is
//! pretrained on clean patches, a compression-aware visual embedder (CaVE)
//! is trained with a dual quality-prediction/reconstruction objective, and a
//! one-step latent restorer is fine-tuned with LoRA adapters against
//! perceptual and adversarial objectives, conditioned on CaVE embeddings.

pub mod cave;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod jpeg;
pub mod nn;
pub mod objectives;
pub mod osd;
pub mod training;

pub use error::{Error, Result};
pub use image::ImagePatch;


