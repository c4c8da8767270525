//! Lego-filter convolutional networks for wearable-sensor activity recognition.
//!
//! Convolution layers are assembled from a small bank of reduced-channel
//! "Lego" filters selected per input fragment by binary masks, trained with
//! a straight-through estimator and optionally with layer-wise local losses.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod lego;
pub mod local_loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod pipeline;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testing;

pub use error::{Error, Result};
pub use tensor::{Param, Scalar, Tensor};
