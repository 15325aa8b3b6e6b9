//! Allocation-only core of the tokenct pipeline.
//!
//! CT volumes are projected into synthetic radiographs, both modalities are
//! compressed into codebook tokens by vector-quantized autoencoders, and a
//! causal transformer translates radiograph tokens into CT tokens. Everything
//! here is pure computation on in-memory data; file formats, training loops
//! and the command line live in the `tokenct` crate.
#![no_std]

extern crate alloc;

pub mod autoencoder;
pub mod drr;
mod error;
pub mod numerics;
pub mod phantom;
pub mod preprocess;
pub mod translator;
pub mod vq;

pub use error::{Error, Result};
pub use numerics::{Real, Tensor};
