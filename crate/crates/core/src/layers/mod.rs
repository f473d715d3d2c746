//! 3-D convolution, batch normalization, pooling and trilinear resampling kernels.

mod conv;
mod norm;
mod pool;
mod upsample;

pub use conv::Conv3dSpec;
pub use norm::{BatchStats, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use pool::PoolSpec;
pub(crate) use upsample::trilinear;
pub use upsample::{linear_taps, Tap};
