//! Salt-and-pepper denoising with median layers.
//!
//! The crate provides a dense tensor library with reverse-mode autodiff,
//! median selection both as a classic filter and as a differentiable layer,
//! a seeded impulse-noise model, a residual CNN with median layers
//! interleaved in its first half, an L2 training loop, PSNR/MSE evaluation
//! harnesses, and minimal PNG/PGM/PPM image I/O.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod filters;
pub mod gradcheck;
pub mod image;
pub mod median;
pub mod metrics;
pub mod network;
pub mod noise;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Shape4, Tensor4};
