use crate::error::Result;
use crate::tensor::{ensure_same, Scalar, Tensor4};

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor4<T>, input: &Tensor4<T>) -> Result<Tensor4<T>> {
    ensure_same("relu_backward", grad_out.shape(), input.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(input.shape(), data)
}

pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    ensure_same("add", a.shape(), b.shape())?;
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

pub fn mul<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    ensure_same("mul", a.shape(), b.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor4::from_vec(a.shape(), data)
}

/// Mean of squared differences, accumulated in f64.
pub fn mse_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<f64> {
    ensure_same("mse_loss", pred.shape(), target.shape())?;
    let n = pred.len().max(1) as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.to_f64_lossy() - t.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Gradient of [`mse_loss`] with respect to `pred`: `2 (pred - target) / count`.
pub fn mse_loss_backward<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<Tensor4<T>> {
    ensure_same("mse_loss_backward", pred.shape(), target.shape())?;
    let k = 2.0 / pred.len().max(1) as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| T::from_f64_lossy(k * (p.to_f64_lossy() - t.to_f64_lossy())))
        .collect();
    Tensor4::from_vec(pred.shape(), data)
}
