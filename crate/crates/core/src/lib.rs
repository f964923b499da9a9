//! Robust fixed-neural-network steganography.
//!
//! A secret image is hidden in a keyed cover as a bounded perturbation
//! confined to textured blocks. A convolutional decoder with random weights,
//! rebuilt from a shared key, maps the perturbation back to the secret. The
//! perturbation is optimized against simulated channel attacks so recovery
//! survives JPEG compression, noise, and contrast changes.

pub mod attack;
pub mod config;
pub mod decoder;
pub mod error;
pub mod image;
pub mod keyed;
pub mod layers;
pub mod metrics;
pub mod pipeline;
pub mod resample;
pub mod rspg;
pub mod texture;

pub use error::{Error, Result};
