//! Adaptive root-mean-square normalization for GAN discriminators.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and a reverse-mode autodiff tape.
//! * [`norm`]: channel statistics, zero-mean regularization, Lipschitz
//!   constrained RMS normalization, stochastic interpolation, the adaptive
//!   `p` controller, running cumulative statistics, and every ablation
//!   variant of the layer.
//! * [`gan`]: a toy GAN on 2-D synthetic data whose discriminator uses the
//!   layer.
//! * [`diagnostics`]: gradient norms, effective rank, cosine similarity,
//!   channel correlation, Lipschitz estimates and a finite-difference
//!   oracle.
//! * [`theorems`]: executable checks of the gradient and decorrelation
//!   properties of the layer.

pub mod diagnostics;
pub mod gan;
pub mod norm;
pub mod tensor;
pub mod theorems;

pub use tensor::{Graph, Tensor, TensorError, Var};
