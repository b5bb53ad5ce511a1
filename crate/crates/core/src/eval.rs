//! Whole-image evaluation over datasets and noise levels, and the paired
//! with/without-median ablation.
//!
//! Denoised outputs are quantized to 8-bit before scoring, exactly as they
//! would be when written to disk.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{BatchSource, PatchPair};
use crate::error::Result;
use crate::image::ImageBuffer;
use crate::metrics;
use crate::network::{build_network, Model, NetworkConfig};
use crate::noise::{apply_salt_pepper, ChannelMode, NoiseSpec};
use crate::rng::derive_seed;
use crate::tensor::Tensor4;
use crate::train::{smoothed_loss, train_loop, TrainConfig, TrainState};

/// Anything mapping a normalized noisy image batch to a denoised one.
pub trait Denoiser {
    fn denoise(&self, noisy: &Tensor4<f32>) -> Result<Tensor4<f32>>;
}

impl Denoiser for Model<f32> {
    fn denoise(&self, noisy: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        self.infer(noisy)
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Denoiser for Identity {
    fn denoise(&self, noisy: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        Ok(noisy.clone())
    }
}

impl<F: Fn(&Tensor4<f32>) -> Result<Tensor4<f32>>> Denoiser for F {
    fn denoise(&self, noisy: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        self(noisy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub mse: f64,
}

/// Mean PSNR is the mean of per-image PSNRs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub level: f64,
    pub mean_psnr: f64,
    pub mean_mse: f64,
    pub count: usize,
    pub images: Vec<ImageScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub rows: Vec<EvalRow>,
}

fn fmt_level(level: f64) -> String {
    format!("{:.2}", level)
}

impl EvalReport {
    pub fn row(&self, level: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| (r.level - level).abs() < 1e-9)
    }

    /// `level,mean_psnr,mean_mse,count`; infinite PSNR is written `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,mean_psnr,mean_mse,count\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{}",
                fmt_level(r.level),
                metrics::format_db(r.mean_psnr),
                r.mean_mse,
                r.count
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("dataset: {}\nmodel:   {}\n", self.dataset, self.model);
        let _ = writeln!(out, "{:>7}  {:>10}  {:>12}  {:>6}", "noise", "PSNR (dB)", "MSE", "images");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>6.0}%  {:>10}  {:>12.4}  {:>6}",
                r.level * 100.0,
                metrics::format_db(r.mean_psnr),
                r.mean_mse,
                r.count
            );
        }
        out
    }
}

/// Contaminates every image at every level (seed derived from
/// `(seed, image index, level index)`), denoises the whole image and scores
/// the quantized output against the clean image.
pub fn evaluate_model(
    denoiser: &dyn Denoiser,
    images: &[(String, ImageBuffer)],
    levels: &[f64],
    seed: u64,
    mode: ChannelMode,
    dataset: &str,
    model: &str,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(levels.len());
    for (li, &level) in levels.iter().enumerate() {
        let mut scores = Vec::with_capacity(images.len());
        for (ii, (name, img)) in images.iter().enumerate() {
            let spec = NoiseSpec::new(level, derive_seed(seed, &[ii as u64, li as u64]))?.with_channel_mode(mode);
            let clean = img.to_normalized::<f32>();
            let out = denoiser.denoise(&apply_salt_pepper(&clean, &spec))?;
            let out8 = ImageBuffer::from_normalized(&out, 0)?;
            let mse = metrics::mse(&out8.to_levels::<f64>(), &img.to_levels::<f64>())?;
            scores.push(ImageScore {
                name: name.clone(),
                psnr: metrics::psnr_from_mse(mse),
                mse,
            });
        }
        let n = scores.len().max(1) as f64;
        rows.push(EvalRow {
            level,
            mean_psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
            mean_mse: scores.iter().map(|s| s.mse).sum::<f64>() / n,
            count: scores.len(),
            images: scores,
        });
    }
    Ok(EvalReport {
        dataset: dataset.to_string(),
        model: model.to_string(),
        rows,
    })
}

/// The two arms of the ablation built from one base config: identical
/// except that the second has no median layers.
pub fn ablation_arms(base: &NetworkConfig) -> (NetworkConfig, NetworkConfig) {
    (
        NetworkConfig {
            median_half: true,
            ..base.clone()
        },
        NetworkConfig {
            median_half: false,
            ..base.clone()
        },
    )
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub label: String,
    pub report: EvalReport,
    pub final_loss: f64,
    pub state: TrainState,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub with_medians: ArmResult,
    pub without_medians: ArmResult,
    pub smoothing_window: usize,
}

impl AblationReport {
    /// `(level, with − without)` PSNR per level.
    pub fn deltas(&self) -> Vec<(f64, f64)> {
        self.with_medians
            .report
            .rows
            .iter()
            .zip(&self.without_medians.report.rows)
            .map(|(w, wo)| (w.level, w.mean_psnr - wo.mean_psnr))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,psnr_without,psnr_with,delta\n");
        for ((w, wo), (_, d)) in self
            .with_medians
            .report
            .rows
            .iter()
            .zip(&self.without_medians.report.rows)
            .zip(self.deltas())
        {
            let _ = writeln!(
                out,
                "{},{},{},{:.4}",
                fmt_level(w.level),
                metrics::format_db(wo.mean_psnr),
                metrics::format_db(w.mean_psnr),
                d
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("dataset: {}\n", self.with_medians.report.dataset);
        let _ = writeln!(out, "{:>7}  {:>12}  {:>12}  {:>8}", "noise", "w/o median", "w/ median", "delta");
        for ((w, wo), (_, d)) in self
            .with_medians
            .report
            .rows
            .iter()
            .zip(&self.without_medians.report.rows)
            .zip(self.deltas())
        {
            let _ = writeln!(
                out,
                "{:>6.0}%  {:>12}  {:>12}  {:>+8.3}",
                w.level * 100.0,
                metrics::format_db(wo.mean_psnr),
                metrics::format_db(w.mean_psnr),
                d
            );
        }
        let _ = writeln!(
            out,
            "final training loss (mean of last {}): w/o {:.6e}, w/ {:.6e}",
            self.smoothing_window, self.without_medians.final_loss, self.with_medians.final_loss
        );
        out
    }
}

/// Everything shared by the two arms of a paired run.
pub struct AblationSetup<'a> {
    pub train: &'a TrainConfig,
    pub source: &'a dyn BatchSource,
    pub validation: &'a [PatchPair],
    pub eval_images: &'a [(String, ImageBuffer)],
    pub eval_levels: &'a [f64],
    pub eval_seed: u64,
    pub dataset: &'a str,
    pub smoothing_window: usize,
    /// Each arm writes into `<out_dir>/with_medians` / `without_medians`.
    pub out_dir: Option<&'a Path>,
}

fn run_arm(label: &str, cfg: &NetworkConfig, setup: &AblationSetup<'_>) -> Result<ArmResult> {
    let mut state = TrainState::new(build_network(cfg)?, setup.train.optimizer)?;
    let dir = setup.out_dir.map(|d| d.join(label));
    log::info!("training arm `{label}`");
    train_loop(&mut state, setup.source, setup.validation, setup.train, dir.as_deref())?;
    let report = evaluate_model(
        &state.model,
        setup.eval_images,
        setup.eval_levels,
        setup.eval_seed,
        ChannelMode::PerChannel,
        setup.dataset,
        &format!("{label} (step {})", state.step),
    )?;
    Ok(ArmResult {
        label: label.to_string(),
        final_loss: smoothed_loss(&state.log, setup.smoothing_window),
        report,
        state,
    })
}

/// Trains and evaluates both arms with the same data, seed and budget.
pub fn ablation_compare(
    with_medians: &NetworkConfig,
    without_medians: &NetworkConfig,
    setup: &AblationSetup<'_>,
) -> Result<AblationReport> {
    Ok(AblationReport {
        with_medians: run_arm("with_medians", with_medians, setup)?,
        without_medians: run_arm("without_medians", without_medians, setup)?,
        smoothing_window: setup.smoothing_window,
    })
}
