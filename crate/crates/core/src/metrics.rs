//! Mean squared error and PSNR on the 8-bit intensity scale.
//!
//! Tensors holding `[0, 1]` values go through the `_normalized` variants,
//! which rescale to 8-bit before scoring. Colour images are scored with a
//! single MSE over all channels.

use crate::error::Result;
use crate::tensor::{ensure_same, Scalar, Tensor4};

/// Peak intensity used in the PSNR numerator.
pub const PEAK: f64 = 255.0;

/// Mean squared difference, accumulated in `f64`.
pub fn mse<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    ensure_same("mse", a.shape(), b.shape())?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(total / a.len().max(1) as f64)
}

/// `10 log10(255² / mse)`; zero MSE gives `f64::INFINITY`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

pub fn psnr<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

/// MSE of `[0, 1]` tensors expressed on the 8-bit scale.
pub fn mse_normalized<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    Ok(mse(a, b)? * PEAK * PEAK)
}

pub fn psnr_normalized<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    mse_normalized(a, b).map(psnr_from_mse)
}

/// Formats a dB value for reports; infinity becomes `inf`.
pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::tensor_uniform;
    use crate::tensor::Shape4;

    #[test]
    fn identical_images() {
        let a = tensor_uniform::<f64>(Shape4::new(1, 1, 8, 8), 1, 0.0, 255.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(format_db(psnr(&a, &a).unwrap()), "inf");
    }

    #[test]
    fn uniform_differences() {
        let s = Shape4::new(1, 3, 5, 7);
        let a = Tensor4::<f64>::full(s, 10.0);
        let b = Tensor4::<f64>::full(s, 26.0);
        assert_eq!(mse(&a, &b).unwrap(), 256.0);
        let white = Tensor4::<f64>::full(s, 255.0);
        let black = Tensor4::<f64>::zeros(s);
        assert_eq!(psnr(&white, &black).unwrap(), 0.0);
        assert_eq!(format_db(0.0), "0.0000");
    }

    #[test]
    fn matches_loop_oracle() {
        let s = Shape4::new(2, 3, 9, 13);
        let a = tensor_uniform::<f64>(s, 2, 0.0, 255.0);
        let b = tensor_uniform::<f64>(s, 3, 0.0, 255.0);
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += (a.data()[i] - b.data()[i]).powi(2);
        }
        let oracle = acc / a.len() as f64;
        assert!((mse(&a, &b).unwrap() - oracle).abs() <= 1e-9 * oracle);
    }

    #[test]
    fn normalized_scale_consistency() {
        let s = Shape4::new(1, 1, 16, 16);
        let a = tensor_uniform::<f32>(s, 4, 0.0, 1.0);
        let b = tensor_uniform::<f32>(s, 5, 0.0, 1.0);
        let a8 = a.map(|v| v * 255.0);
        let b8 = b.map(|v| v * 255.0);
        let lhs = mse_normalized(&a, &b).unwrap();
        let rhs = mse(&a8, &b8).unwrap();
        assert!((lhs - rhs).abs() <= 1e-6 * rhs);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor4::<f64>::zeros(Shape4::new(1, 1, 4, 4));
        let b = Tensor4::<f64>::zeros(Shape4::new(1, 1, 4, 5));
        let msg = mse(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("(1, 1, 4, 4)") && msg.contains("(1, 1, 4, 5)"));
    }
}
