//! Entangled residual mappings.
//!
//! Residual blocks compute `f(x) + x`. Replacing the identity skip with a
//! constant operator `Γ` gives `f(x) + x Γ` (or a constant convolution for
//! feature maps and sequences). This crate builds those operators, drops them
//! into small residual, attention and recurrent blocks with a reverse-mode
//! engine, measures iterative-refinement ratios, and runs seeded desk-scale
//! experiments from a plain-text config.

pub mod autodiff;
pub mod blocks;
pub mod entangle;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod refine;
pub mod rng;
pub mod tensor;

pub use entangle::{ConvKernel, EntanglementKind, EntanglementSpec, Entangler};
pub use error::{Error, Result};
pub use linalg::DenseMatrix;
pub use tensor::Tensor;
