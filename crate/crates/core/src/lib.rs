#![cfg_attr(not(test), no_std)]
//! Core algorithms for a lightweight face-swap GAN.
//!
//! The crate is `no_std` (it needs `alloc`) and contains no IO: tensors with
//! reverse-mode differentiation, the fixed-width generator with identity
//! injection and attention fusion, patch critics, training losses, triplet
//! construction, landmark alignment and a single-step trainer. File formats,
//! timing and the command line live in the `lightswap` crate.

extern crate alloc;

pub mod align;
pub mod blocks;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod losses;
pub mod optim;
pub mod params;
pub mod perception;
pub mod scalar;
pub mod stats;
pub mod synth;
pub mod tape;
pub mod tensor;
#[cfg(test)]
mod testutil;
pub mod train;
pub mod triplet;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tape::{Activation, Tape, Var};
pub use tensor::{AnyTensor, Tensor};
