//! Epipolar consistency scoring for frame sequences, preference-pair
//! construction, and the Flow-DPO alignment objective.
//!
//! The crate is `no_std` (it needs `alloc`). Decoding, file formats and the
//! command-line driver live in the `epigeo` crate.
//!
//! Pipeline overview:
//!
//! 1. [`features`] detects scale-space keypoints on [`image::Frame`]s and
//!    matches their gradient-histogram descriptors.
//! 2. [`epipolar`] fits a fundamental matrix with the normalized 8-point
//!    algorithm inside RANSAC and measures Sampson / symmetric epipolar error.
//! 3. [`scoring`] aggregates per-pair errors into a [`scoring::VideoScore`].
//! 4. [`dataset`] ranks generations of one prompt and emits filtered
//!    [`dataset::PreferencePair`]s.
//! 5. [`alignment`] implements the Flow-DPO loss with the temporal variation
//!    penalty and a small linear-model training demonstrator.
//!
//! [`synth`] generates ground-truth scenes and cameras used throughout the
//! tests.
#![no_std]
// `!(x > y)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod alignment;
pub mod dataset;
pub mod epipolar;
mod error;
pub mod features;
pub mod image;
pub mod scoring;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
