//! Semi-supervised multi-organ segmentation with magic-cube partition and
//! mixing, cube-wise pseudo-label blending and cube-location reasoning.
//!
//! The crate is `no_std` (with `alloc`) and carries every algorithm: volume
//! containers, cube geometry, the network, losses, blending, the phantom
//! generator, evaluation metrics and the training loop. File formats, the
//! command line and threading live in the `magicnet` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod blending;
pub mod error;
pub mod eval;
pub mod losses;
pub mod magic_cube;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
