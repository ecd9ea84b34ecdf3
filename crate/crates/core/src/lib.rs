//! Gated attention units and mixed chunk attention.
//!
//! This crate is `no_std` (it needs `alloc`). It contains the dense tensor
//! engine with reverse-mode autodiff, the parametric layers, the quadratic
//! GAU block and the chunked FLASH block with their reference oracles,
//! language-model assembly and training, and constant-memory streaming
//! decoding. File IO, timing and the command line live in the `flashkit`
//! companion crate.
//!
//! Enable the `std` feature to let the GEMM kernel use runtime CPU feature
//! detection.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod decode;
pub mod error;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};

pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod testutil;
