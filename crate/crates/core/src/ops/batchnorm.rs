//! Per-channel batch normalization.

use crate::error::{Error, Result};
use crate::tensor::{ensure_same, Scalar, Shape4, Tensor4};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance used in eval mode.
///
/// Updated as `running = momentum * running + (1 - momentum) * batch`, with
/// the unbiased batch variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor4<T>,
    pub var: Tensor4<T>,
    pub momentum: f64,
    pub epsilon: f64,
    initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    /// Uninitialized statistics for `channels` channels.
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        let shape = Shape4::new(1, channels, 1, 1);
        RunningStats {
            mean: Tensor4::zeros(shape),
            var: Tensor4::ones(shape),
            momentum,
            epsilon,
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.shape().c
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Marks the current values (zero mean, unit variance after `new`) as valid.
    pub fn initialize(&mut self) {
        self.initialized = true;
    }

    /// Installs explicit statistics.
    pub fn set(&mut self, mean: Tensor4<T>, var: Tensor4<T>) -> Result<()> {
        ensure_same("running mean", mean.shape(), self.mean.shape())?;
        ensure_same("running var", var.shape(), self.var.shape())?;
        self.mean = mean;
        self.var = var;
        self.initialized = true;
        Ok(())
    }
}

/// Context saved by the forward pass for [`batchnorm_backward`].
#[derive(Debug, Clone)]
pub struct BatchNormSaved<T> {
    x_hat: Tensor4<T>,
    inv_std: Vec<f64>,
    mode: Mode,
}

fn check_affine<T: Scalar>(x: &Tensor4<T>, scale: &Tensor4<T>, shift: &Tensor4<T>) -> Result<()> {
    let want = Shape4::new(1, x.shape().c, 1, 1);
    ensure_same("batchnorm scale", scale.shape(), want)?;
    ensure_same("batchnorm shift", shift.shape(), want)
}

/// Sums per channel over (batch, height, width) in a fixed order.
fn channel_sums<T: Scalar>(x: &Tensor4<T>, f: impl Fn(usize, T) -> f64) -> Vec<f64> {
    let s = x.shape();
    let mut acc = vec![0.0; s.c];
    for n in 0..s.n {
        for (c, a) in acc.iter_mut().enumerate() {
            *a += x.plane(n, c).iter().map(|&v| f(c, v)).sum::<f64>();
        }
    }
    acc
}

/// Batch normalization forward.
///
/// Train mode normalizes with batch statistics and updates `stats`; eval
/// mode uses `stats` and fails if they were never initialized.
pub fn batchnorm<T: Scalar>(
    x: &Tensor4<T>,
    scale: &Tensor4<T>,
    shift: &Tensor4<T>,
    mode: Mode,
    stats: &mut RunningStats<T>,
) -> Result<(Tensor4<T>, BatchNormSaved<T>)> {
    check_affine(x, scale, shift)?;
    if stats.channels() != x.shape().c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm running stats",
            left: stats.mean.shape(),
            right: x.shape(),
        });
    }
    let s = x.shape();
    let count = (s.n * s.h * s.w) as f64;
    let (mean, var) = match mode {
        Mode::Train => {
            let mean: Vec<f64> = channel_sums(x, |_, v| v.to_f64_lossy())
                .into_iter()
                .map(|v| v / count)
                .collect();
            let var: Vec<f64> = channel_sums(x, |c, v| {
                let d = v.to_f64_lossy() - mean[c];
                d * d
            })
            .into_iter()
            .map(|v| v / count)
            .collect();
            let m = stats.momentum;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for c in 0..s.c {
                let rm = &mut stats.mean.data_mut()[c];
                *rm = T::from_f64_lossy(m * rm.to_f64_lossy() + (1.0 - m) * mean[c]);
                let rv = &mut stats.var.data_mut()[c];
                *rv = T::from_f64_lossy(m * rv.to_f64_lossy() + (1.0 - m) * var[c] * unbias);
            }
            stats.initialized = true;
            (mean, var)
        }
        Mode::Eval => {
            if !stats.initialized {
                return Err(Error::RunningStatsUninitialized);
            }
            (
                stats.mean.data().iter().map(|v| v.to_f64_lossy()).collect(),
                stats.var.data().iter().map(|v| v.to_f64_lossy()).collect(),
            )
        }
    };
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v + stats.epsilon).sqrt())
        .collect();

    let mut x_hat = Tensor4::zeros(s);
    let mut y = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, is) = (mean[c], inv_std[c]);
            let (g, b) = (scale.data()[c], shift.data()[c]);
            let src = x.plane(n, c);
            let xh = x_hat.plane_mut(n, c);
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = T::from_f64_lossy((v.to_f64_lossy() - mu) * is);
            }
            let xh = x_hat.plane(n, c);
            for (o, &v) in y.plane_mut(n, c).iter_mut().zip(xh) {
                *o = g * v + b;
            }
        }
    }
    Ok((y, BatchNormSaved { x_hat, inv_std, mode }))
}

/// Gradients of batch normalization: `(grad_input, grad_scale, grad_shift)`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor4<T>,
    saved: &BatchNormSaved<T>,
    scale: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)> {
    ensure_same("batchnorm_backward", grad_out.shape(), saved.x_hat.shape())?;
    let s = grad_out.shape();
    let count = (s.n * s.h * s.w) as f64;
    let sum_g = channel_sums(grad_out, |_, v| v.to_f64_lossy());
    let mut sum_gx = vec![0.0; s.c];
    for n in 0..s.n {
        for (c, acc) in sum_gx.iter_mut().enumerate() {
            *acc += grad_out
                .plane(n, c)
                .iter()
                .zip(saved.x_hat.plane(n, c))
                .map(|(&g, &xh)| g.to_f64_lossy() * xh.to_f64_lossy())
                .sum::<f64>();
        }
    }

    let mut gx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let k = scale.data()[c].to_f64_lossy() * saved.inv_std[c];
            let go = grad_out.plane(n, c);
            let xh = saved.x_hat.plane(n, c);
            let out = gx.plane_mut(n, c);
            match saved.mode {
                Mode::Train => {
                    for ((o, &g), &h) in out.iter_mut().zip(go).zip(xh) {
                        let v = k / count
                            * (count * g.to_f64_lossy() - sum_g[c] - h.to_f64_lossy() * sum_gx[c]);
                        *o = T::from_f64_lossy(v);
                    }
                }
                Mode::Eval => {
                    for (o, &g) in out.iter_mut().zip(go) {
                        *o = T::from_f64_lossy(k * g.to_f64_lossy());
                    }
                }
            }
        }
    }
    let cs = Shape4::new(1, s.c, 1, 1);
    let to_t = |v: Vec<f64>| {
        Tensor4::from_vec(cs, v.into_iter().map(T::from_f64_lossy).collect())
            .expect("one value per channel")
    };
    Ok((gx, to_t(sum_gx), to_t(sum_g)))
}
