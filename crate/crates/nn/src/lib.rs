//! Minimal f64 tensor library with a tape-based reverse-mode autodiff engine.
//!
//! The engine is deliberately small: it covers exactly the operations the
//! microdiff denoiser, text encoder and autoencoder need, and every op has a
//! hand-written backward pass checked against finite differences in the tests.

mod graph;
mod kernels;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, Adam, AdamState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
