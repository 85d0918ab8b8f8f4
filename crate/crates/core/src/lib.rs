//! Core engine for replaced-token-detection (RTD) pretraining of a
//! disentangled-attention encoder.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds without `std`; file formats, the command line and the threaded
//! batch prefetcher live in the `rtd-pretrain` companion crate.
//!
//! Module map:
//!
//! * [`tensor`] and [`tape`]: dense row-major tensors and a dynamic
//!   reverse-mode tape with the primitives the model needs.
//! * [`data`]: toy frequency vocabulary, encoding, greedy packing and
//!   dynamic masking.
//! * [`model`]: generator and discriminator encoders with shared relative
//!   position projections, the first-layer convolution branch and
//!   gradient-disentangled embedding sharing (GDES).
//! * [`objective`]: MLM loss, replacement sampling, RTD labelling and loss.
//! * [`optim`]: LAMB and the warm-up / linear-decay schedule.
//! * [`train`]: one accumulated optimizer step over a set of micro-batches.
//! * [`verify`]: finite-difference and structural oracles.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod model;
pub mod objective;
pub mod optim;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
