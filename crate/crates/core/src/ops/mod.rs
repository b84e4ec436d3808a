//! Numerical kernels on [`Tensor`](crate::tensor::Tensor) values, with the
//! adjoints the tape needs.

pub mod activation;
pub mod conv;
pub mod norm;
pub mod spatial;

pub use activation::{sigmoid, silu};
pub use conv::{conv2d, conv2d_backward, ConvGeometry};
pub use norm::channel_norm;
pub use spatial::{concat_channels, global_avg_pool, mul_channel, resize_bilinear, upsample_nearest2x};
