//! Motion latent diffusion engine.
//!
//! Two-stage generative pipeline for variable-length motion sequences: a
//! transformer VAE compresses a motion into a small set of latent tokens, and
//! a conditional latent diffusion model (classifier-free guidance, DDPM/DDIM
//! samplers) generates new latents from text, action labels, or nothing at
//! all. Everything runs on an in-crate dense-tensor autodiff engine; no BLAS,
//! no GPU. A synthetic labeled/texted motion corpus makes the whole pipeline
//! trainable and measurable at desk scale, and an evaluation suite (FID,
//! diversity, multimodality, R-precision, MM-Dist, ACC, MPJPE/PAMPJPE/ACCL,
//! inference-time benchmarking) closes the loop.

pub mod checkpoint;
pub mod cond;
pub mod diffusion;
pub mod eval;
pub mod motion;
pub mod nn;
pub mod numerics;
pub mod rng;
pub mod vae;

mod error;

pub use error::{Error, Result};
