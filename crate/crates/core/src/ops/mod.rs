//! Primitive forward and backward kernels on plain tensors.

pub mod activation;
pub mod conv;
pub mod norm;
pub mod pool;
pub mod shape;

pub use activation::{prelu, sigmoid, swish};
pub use conv::{conv2d, ConvParams};
pub use norm::{batch_norm, BnMode, BnParams};
pub use pool::global_avg_pool;
pub use shape::channel_shuffle;
