//! Semi-supervised contrastive learning for extremely imbalanced tile
//! collections.
//!
//! This crate is the allocation-only algorithmic core: neural-network layers
//! with hand-written backward passes, the two-view siamese model, the loss
//! family (negative cosine, symmetric siamese loss, supervised contrastive
//! loss, uncertainty-weighted fusion), pseudo-negative synthesis, exact
//! hypergeometric purity, metrics, augmentation and the synthetic terrain
//! generator. Everything that touches a filesystem lives in the `sscl` crate.

#![no_std]
#![deny(unsafe_op_in_unsafe_fn)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod augment;
pub mod datagen;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod pseudolabel;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
