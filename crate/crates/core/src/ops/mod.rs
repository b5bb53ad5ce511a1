//! Tensor kernels. Each forward has a matching backward; the tape in
//! [`crate::autograd`] wires them together.

mod batchnorm;
mod conv;
mod elementwise;

pub use batchnorm::{
    batchnorm, batchnorm_backward, BatchNormSaved, Mode, RunningStats, DEFAULT_EPSILON,
    DEFAULT_MOMENTUM,
};
pub use conv::{conv2d, conv2d_backward};
pub use elementwise::{add, mse_loss, mse_loss_backward, mul, relu, relu_backward};
