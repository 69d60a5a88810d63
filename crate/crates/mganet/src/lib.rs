//! Single-step musical tempo estimation from raw audio.
//!
//! The crate implements the full pipeline behind a multi-scale grouped
//! attention tempo classifier: a mel-spectrogram frontend, a small dense
//! tensor core with reverse-mode autodiff, the network itself, training
//! with tempo-scale augmentation, Accuracy1/Accuracy2 evaluation, Grad-CAM
//! heatmaps, and a synthetic click-track generator for verifiable
//! desk-scale experiments.

// numeric kernels index by design: the loop shapes control vectorization
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod manifest;
pub mod network;
pub mod ops;
pub mod params;
pub mod selftest;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod wav;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
