//! U-shaped segmentation networks with batch, layer and batch-instance
//! normalization, built on a small tape-based autodiff core.

// NaN-rejecting range checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augmentation;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod image;
pub mod metrics;
pub mod network;
pub mod normalization;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
