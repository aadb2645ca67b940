//! Template-guided news image captioning, built from scratch.
//!
//! The crate is `no_std` with `alloc`: every numerical path (autograd,
//! models, training loops, metrics, synthetic data) is pure computation.
//! File formats, checkpoints and the command line live in the `newscap`
//! companion crate.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]
// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autograd;
pub mod corpus;
pub mod decoder;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod math;
pub mod metrics;
pub mod nee;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod taxonomy;

pub use error::{Error, Result};
