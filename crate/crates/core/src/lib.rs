//! Toy unified vision-language-diffusion pipeline built around a
//! lightweight conditioning projector.
//!
//! A small autoregressive VLM produces per-layer hidden states; the
//! projector fuses the last K layers, compresses them, refines them with a
//! depthwise-separable convolution plus channel gate and projects them to
//! the width expected by the diffusion transformer's cross-attention. The
//! generator is trained with flow matching and sampled with an Euler
//! integrator.

pub mod backbones;
pub mod datagen;
pub mod error;
pub mod flowsampler;
pub mod image;
pub mod mcp;
pub mod numerics;
pub mod objectives;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
