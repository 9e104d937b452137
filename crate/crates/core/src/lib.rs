//! Core of a few-shot semantic segmentation benchmark.
//!
//! Everything here is pure computation over in-memory data and builds on
//! `alloc` only: k-shot task sampling, confusion-matrix metrics, image and
//! mask resampling, a small reverse-mode tape, a reference ViT-style
//! encoder, parameter-efficient adapters (SVF, LoRA, BitFit), the two-stage
//! trainer, and run aggregation. File formats and the CLI live in the `fss`
//! crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adaptation;
pub mod autograd;
pub mod datamodel;
pub mod datasets;
pub mod digest;
pub mod encoder;
pub mod error;
pub mod imageops;
pub mod linalg;
pub mod metrics;
pub mod params;
pub mod report;
pub mod resample;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
