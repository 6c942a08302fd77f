//! 3-D network kernels. Each differentiable op has a gradient rule; the
//! convolutions also have direct-loop reference twins in [`naive`].

mod conv;
mod linear;
pub mod naive;
mod pool;
mod resize;

pub use conv::{conv3d, conv3d_transposed, Conv3dSpec, TransposedConv3dSpec};
pub use linear::{global_avg_pool, linear};
pub use naive::{conv3d_naive, conv3d_transposed_naive};
pub use pool::maxpool3d;
pub use resize::trilinear_resize;
pub(crate) use resize::LinearTaps;
