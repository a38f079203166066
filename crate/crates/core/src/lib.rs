//! Masked face recognition by mask decoupling and identity-preserving
//! unmasked face restoration.
//!
//! Stage 1 trains an encoder whose final feature map is split by an
//! attention map into an identity part (ArcFace-supervised) and a mask part
//! (supervised by a 101-class mask-location classifier). Stage 2 adds a
//! style-modulated U-Net decoder fed with mask-suppressed skip connections
//! and a patch discriminator, and re-encodes the restored faces so that
//! their embeddings stay close to the real unmasked ones.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod face_data;
pub mod generator;
pub mod losses;
pub mod mask_patterns;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{MeerError, Result};
