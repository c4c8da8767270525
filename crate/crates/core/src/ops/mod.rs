//! Numeric kernels with hand-written reverse-mode gradients.

pub mod activation;
pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod pool;

pub use activation::{argmax_rows, relu, relu_backward, softmax, softmax_cross_entropy};
pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{BatchNorm, Mode};
pub use conv::{add_channel_bias, channel_bias_grad, conv_backward, conv_forward, ConvSpec};
pub use dense::{dense_backward, dense_forward};
pub use pool::{maxpool, maxpool_backward, PoolIndices};
