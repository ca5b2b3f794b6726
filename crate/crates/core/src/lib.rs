//! microdiff: a desk-scale toolkit for SDXL-style diffusion.
//!
//! Micro-conditioning, multi-aspect bucketing, a heterogeneous UNet
//! denoiser, DSM training, guided DDIM / ODE / SDE sampling, SDEdit
//! refinement, a toy autoencoder and Fréchet-distance evaluation.

pub mod autoencoder;
pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod embedding;
pub mod eval;
mod error;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod sidecar;
pub mod textenc;
pub mod train;

pub use error::{Error, Result};
