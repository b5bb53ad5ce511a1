//! Classic filters: median and Gaussian smoothing, repeated median
//! filtering with a PSNR trajectory, and the alternating median/Gaussian
//! schedule on 1D signals.
//!
//! Border policies differ by dimension. 2D median filtering takes a
//! [`Border`]; zero padding reproduces the median layer exactly, while
//! reflection keeps repeated filtering from darkening the image edges. The
//! 1D median shrinks its window at the ends of the signal (an even-sized
//! window yields the mean of its two middle values). Gaussian smoothing is
//! zero-padded in both 1D and 2D.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::median::{median_plane, Border, MedianLayerSpec};
use crate::metrics;
use crate::noise::{apply_salt_pepper_1d, NoiseSpec};
use crate::tensor::{Scalar, Tensor4};

/// Classic 2D median filter applied to every plane of `image`.
///
/// With [`Border::Zero`] the result equals the median layer's values.
pub fn median_filter_2d<T: Scalar>(image: &Tensor4<T>, kernel: usize, border: Border) -> Result<Tensor4<T>> {
    let spec = MedianLayerSpec::new(kernel)?;
    let s = image.shape();
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            median_plane(image.plane(n, c), s.h, s.w, spec, border, out.plane_mut(n, c), None);
        }
    }
    Ok(out)
}

/// 1D median filter with a window that shrinks at the signal ends.
pub fn median_filter_1d(signal: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::config("window", format!("must be odd, got {window}")));
    }
    let r = window / 2;
    let n = signal.len();
    let mut buf = Vec::with_capacity(window);
    Ok((0..n)
        .map(|i| {
            buf.clear();
            buf.extend_from_slice(&signal[i.saturating_sub(r)..(i + r + 1).min(n)]);
            buf.sort_by(f64::total_cmp);
            let m = buf.len();
            if m % 2 == 1 {
                buf[m / 2]
            } else {
                0.5 * (buf[m / 2 - 1] + buf[m / 2])
            }
        })
        .collect())
}

/// Sampled Gaussian kernel of odd width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernelSpec {
    window: usize,
    sigma: f64,
}

impl GaussianKernelSpec {
    pub fn new(window: usize, sigma: f64) -> Result<Self> {
        if window == 0 || window % 2 == 0 {
            return Err(Error::config("gaussian.window", format!("must be odd, got {window}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::config("gaussian.sigma", format!("must be positive, got {sigma}")));
        }
        Ok(GaussianKernelSpec { window, sigma })
    }

    /// Sigma defaults to a quarter of the window.
    pub fn with_window(window: usize) -> Result<Self> {
        Self::new(window, window as f64 / 4.0)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Normalized weights, centre at `window / 2`.
    pub fn weights(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

fn convolve_zero_padded(signal: &[f64], weights: &[f64]) -> Vec<f64> {
    let r = weights.len() / 2;
    let n = signal.len();
    (0..n)
        .map(|i| {
            weights
                .iter()
                .enumerate()
                .filter_map(|(t, &wt)| {
                    let j = (i + t).checked_sub(r)?;
                    (j < n).then(|| wt * signal[j])
                })
                .sum()
        })
        .collect()
}

pub fn gaussian_filter_1d(signal: &[f64], spec: GaussianKernelSpec) -> Vec<f64> {
    convolve_zero_padded(signal, &spec.weights())
}

/// Separable zero-padded Gaussian smoothing of every plane.
pub fn gaussian_filter_2d(image: &Tensor4<f64>, spec: GaussianKernelSpec) -> Tensor4<f64> {
    let s = image.shape();
    let wts = spec.weights();
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = image.plane(n, c);
            let mut rows = vec![0.0; s.plane()];
            for y in 0..s.h {
                let line = convolve_zero_padded(&src[y * s.w..(y + 1) * s.w], &wts);
                rows[y * s.w..(y + 1) * s.w].copy_from_slice(&line);
            }
            let dst = out.plane_mut(n, c);
            let mut col = vec![0.0; s.h];
            for x in 0..s.w {
                for y in 0..s.h {
                    col[y] = rows[y * s.w + x];
                }
                for (y, v) in convolve_zero_padded(&col, &wts).into_iter().enumerate() {
                    dst[y * s.w + x] = v;
                }
            }
        }
    }
    out
}

/// Result of [`repeated_median`]: `iterates[i]` is the image after `i`
/// applications (`iterates[0]` is the input) and `psnr[i]` its score.
#[derive(Debug, Clone)]
pub struct RepeatedMedian {
    pub iterates: Vec<Tensor4<f64>>,
    pub psnr: Vec<f64>,
}

impl RepeatedMedian {
    /// Iteration count with the highest PSNR (first one on ties).
    pub fn best_iteration(&self) -> usize {
        argmax(&self.psnr)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Applies the median filter `iterations` times to an 8-bit-scale image,
/// scoring every iterate against `reference`.
pub fn repeated_median(
    image: &Tensor4<f64>,
    reference: &Tensor4<f64>,
    kernel: usize,
    iterations: usize,
    border: Border,
) -> Result<RepeatedMedian> {
    let mut iterates = vec![image.clone()];
    let mut psnr = vec![metrics::psnr(image, reference)?];
    for _ in 0..iterations {
        let next = median_filter_2d(iterates.last().expect("non-empty"), kernel, border)?;
        psnr.push(metrics::psnr(&next, reference)?);
        iterates.push(next);
    }
    Ok(RepeatedMedian { iterates, psnr })
}

/// PSNR after 0..=iterations median passes, without keeping the iterates.
pub fn median_psnr_trajectory(
    image: &Tensor4<f64>,
    reference: &Tensor4<f64>,
    kernel: usize,
    iterations: usize,
    border: Border,
) -> Result<Vec<f64>> {
    let mut current = image.clone();
    let mut psnr = vec![metrics::psnr(&current, reference)?];
    for _ in 0..iterations {
        current = median_filter_2d(&current, kernel, border)?;
        psnr.push(metrics::psnr(&current, reference)?);
    }
    Ok(psnr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Median,
    Gaussian,
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterKind::Median => "median",
            FilterKind::Gaussian => "gaussian",
        })
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "median" | "m" => Ok(FilterKind::Median),
            "gaussian" | "g" => Ok(FilterKind::Gaussian),
            other => Err(Error::config("schedule", format!("unknown filter `{other}`"))),
        }
    }
}

/// Parses a comma-separated schedule such as `median,gaussian,median`.
pub fn parse_schedule(s: &str) -> Result<Vec<FilterKind>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone)]
pub struct FilterStep {
    pub kind: FilterKind,
    pub signal: Vec<f64>,
    pub mse: f64,
}

fn mse_1d(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Applies `schedule` in order, recording the MSE against `reference`
/// after each step.
pub fn alternate_filters_1d(
    signal: &[f64],
    reference: &[f64],
    schedule: &[FilterKind],
    median_window: usize,
    gaussian: GaussianKernelSpec,
) -> Result<Vec<FilterStep>> {
    if schedule.is_empty() {
        return Err(Error::config("schedule", "must contain at least one filter"));
    }
    if signal.len() != reference.len() {
        return Err(Error::config(
            "reference",
            format!("length {} differs from signal length {}", reference.len(), signal.len()),
        ));
    }
    let mut current = signal.to_vec();
    let mut steps = Vec::with_capacity(schedule.len());
    for &kind in schedule {
        current = match kind {
            FilterKind::Median => median_filter_1d(&current, median_window)?,
            FilterKind::Gaussian => gaussian_filter_1d(&current, gaussian),
        };
        steps.push(FilterStep {
            kind,
            mse: mse_1d(&current, reference),
            signal: current.clone(),
        });
    }
    Ok(steps)
}

/// The 1D denoising demo: an evenly sampled period of `sin(2πt)`,
/// `t ∈ [0, 1)`, hit by impulse noise with extremes ±1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineDemo {
    pub samples: usize,
    pub level: f64,
    pub window: usize,
    pub sigma: f64,
}

impl Default for SineDemo {
    fn default() -> Self {
        SineDemo {
            samples: 2000,
            level: 0.5,
            window: 5,
            sigma: 1.25,
        }
    }
}

impl SineDemo {
    pub fn clean(&self) -> Vec<f64> {
        (0..self.samples)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / self.samples as f64).sin())
            .collect()
    }

    pub fn noisy(&self, seed: u64) -> Result<Vec<f64>> {
        let spec = NoiseSpec::new(self.level, seed)?.with_extremes(1.0, -1.0)?;
        Ok(apply_salt_pepper_1d(&self.clean(), &spec))
    }

    pub fn run(&self, schedule: &[FilterKind], seed: u64) -> Result<Vec<FilterStep>> {
        let gaussian = GaussianKernelSpec::new(self.window, self.sigma)?;
        alternate_filters_1d(&self.noisy(seed)?, &self.clean(), schedule, self.window, gaussian)
    }
}

/// CSV with header `step,filter_kind,mse`; steps are 1-based.
pub fn steps_to_csv(steps: &[FilterStep]) -> String {
    let mut out = String::from("step,filter_kind,mse\n");
    for (i, s) in steps.iter().enumerate() {
        out.push_str(&format!("{},{},{:.10}\n", i + 1, s.kind, s.mse));
    }
    out
}
