//! Training and ablation settings.
//!
//! Settings are resolved in three layers: per-command defaults, then an
//! optional `key = value` file (`--config`), then command-line flags. The
//! merged file is checked for unknown keys before anything is loaded.
//! Relative paths in a settings file are taken relative to the working
//! directory, like paths given on the command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::Args;
use medianet::config::{join_list, parse_list, KvFile};
use medianet::dataset::{
    build_training_set, grid_patches, parse_size, validation_set, BatchSource, DatasetManifest, PairSampler,
    PatchPair, PatchSampler,
};
use medianet::image::ImageBuffer;
use medianet::network::{NetworkConfig, NETWORK_KEYS};
use medianet::noise::ChannelMode;
use medianet::rng::derive_seed;
use medianet::tensor::Tensor4;
use medianet::train::{TrainConfig, TRAIN_KEYS};

pub const DATA_KEYS: &[&str] = &[
    "data",
    "val",
    "patch",
    "stride",
    "crop",
    "resize",
    "sampler",
    "val_seed",
    "channel_mode",
];

pub const EVAL_KEYS: &[&str] = &["eval", "eval_levels", "eval_seed", "smoothing_window"];

/// How training batches are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// A new noise realization for every sample.
    Fresh,
    /// One fixed noisy copy per patch and level.
    Fixed,
}

impl FromStr for SamplerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fresh" => Ok(SamplerKind::Fresh),
            "fixed" => Ok(SamplerKind::Fixed),
            other => Err(format!("unknown sampler `{other}` (expected fresh or fixed)")),
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Fresh => "fresh",
            SamplerKind::Fixed => "fixed",
        })
    }
}

/// Flags shared by `train` and `ablation`. Every flag overrides the key of
/// the same name (with `-` replaced by `_`).
#[derive(Args, Debug, Clone, Default)]
pub struct ExperimentFlags {
    /// Settings file of `key = value` lines; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training images: a directory or a manifest file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation images: a directory or a manifest file.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub median_kernel: Option<usize>,
    #[arg(long)]
    pub leading_medians: Option<usize>,
    /// Image channels the network works on (1 or 3).
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Comma-separated noise levels, e.g. `0.1,0.5,0.9`.
    #[arg(long)]
    pub levels: Option<String>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    #[arg(long)]
    pub validation_interval: Option<u64>,
    /// Side of the square grid patches cut from each training image.
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Random square crop taken from each patch per sample, or `none`.
    #[arg(long)]
    pub crop: Option<String>,
    /// Resize target applied on load, `WIDTHxHEIGHT` or `none`.
    #[arg(long)]
    pub resize: Option<String>,
    /// fresh (new noise per sample) or fixed (one noisy copy per level).
    #[arg(long)]
    pub sampler: Option<String>,
    /// Seeds network initialization and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ExperimentFlags {
    fn overrides(&self, kv: &mut KvFile) {
        fn put<T: ToString>(kv: &mut KvFile, key: &str, v: &Option<T>) {
            if let Some(v) = v {
                kv.push(key, v.to_string());
            }
        }
        put(kv, "data", &self.data.as_ref().map(|p| p.display()));
        put(kv, "val", &self.val.as_ref().map(|p| p.display()));
        put(kv, "blocks", &self.blocks);
        put(kv, "features", &self.features);
        put(kv, "median_kernel", &self.median_kernel);
        put(kv, "leading_medians", &self.leading_medians);
        put(kv, "channels", &self.channels);
        put(kv, "steps", &self.steps);
        put(kv, "batch_size", &self.batch_size);
        put(kv, "lr", &self.lr);
        put(kv, "optimizer", &self.optimizer);
        put(kv, "levels", &self.levels);
        put(kv, "checkpoint_interval", &self.checkpoint_interval);
        put(kv, "validation_interval", &self.validation_interval);
        put(kv, "patch", &self.patch);
        put(kv, "stride", &self.stride);
        put(kv, "crop", &self.crop);
        put(kv, "resize", &self.resize);
        put(kv, "sampler", &self.sampler);
        put(kv, "seed", &self.seed);
        put(kv, "train_seed", &self.seed);
    }
}

/// Extra flags of `ablation`.
#[derive(Args, Debug, Clone, Default)]
pub struct EvalFlags {
    /// Held-out images scored after training.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Comma-separated noise levels for the held-out scores.
    #[arg(long)]
    pub eval_levels: Option<String>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    /// Number of trailing loss values averaged into the final loss.
    #[arg(long)]
    pub smoothing_window: Option<usize>,
}

impl EvalFlags {
    fn overrides(&self, kv: &mut KvFile) {
        if let Some(p) = &self.eval {
            kv.push("eval", p.display());
        }
        if let Some(v) = &self.eval_levels {
            kv.push("eval_levels", v);
        }
        if let Some(v) = self.eval_seed {
            kv.push("eval_seed", v);
        }
        if let Some(v) = self.smoothing_window {
            kv.push("smoothing_window", v);
        }
    }
}

fn parse_optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    if v == "none" {
        return Ok(None);
    }
    v.parse::<T>()
        .map(Some)
        .map_err(|e| anyhow::anyhow!("invalid value for `{key}`: cannot parse `{v}`: {e}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub data: PathBuf,
    pub val: Option<PathBuf>,
    pub patch: usize,
    pub stride: usize,
    pub crop: Option<usize>,
    pub resize: Option<(usize, usize)>,
    pub sampler: SamplerKind,
    pub val_seed: u64,
    pub channel_mode: ChannelMode,
}

impl DataConfig {
    pub fn read_kv(kv: &KvFile) -> Result<Self> {
        let data = kv.get("data").context("no training data: pass --data or set `data` in the settings file")?;
        let cfg = DataConfig {
            data: PathBuf::from(data),
            val: kv.get("val").filter(|v| *v != "none").map(PathBuf::from),
            patch: kv.parse_opt("patch")?.unwrap_or(70),
            stride: kv.parse_opt("stride")?.unwrap_or(65),
            crop: match kv.get("crop") {
                Some(v) => parse_optional("crop", v)?,
                None => None,
            },
            resize: match kv.get("resize") {
                Some("none") => None,
                Some(v) => Some(parse_size(v)?),
                None => Some((200, 200)),
            },
            sampler: match kv.get("sampler") {
                Some(v) => v.parse().map_err(anyhow::Error::msg)?,
                None => SamplerKind::Fresh,
            },
            val_seed: kv.parse_opt("val_seed")?.unwrap_or(0),
            channel_mode: kv.parse_opt("channel_mode")?.unwrap_or_default(),
        };
        if cfg.patch == 0 || cfg.stride == 0 {
            bail!("invalid value for `patch`/`stride`: both must be at least 1");
        }
        if let Some(c) = cfg.crop {
            if c == 0 || c > cfg.patch {
                bail!("invalid value for `crop`: must lie in 1..={}, got {c}", cfg.patch);
            }
        }
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvFile) {
        kv.push("data", self.data.display());
        kv.push("val", self.val.as_ref().map_or("none".to_string(), |p| p.display().to_string()));
        kv.push("patch", self.patch);
        kv.push("stride", self.stride);
        kv.push("crop", self.crop.map_or("none".to_string(), |c| c.to_string()));
        kv.push(
            "resize",
            self.resize.map_or("none".to_string(), |(w, h)| format!("{w}x{h}")),
        );
        kv.push("sampler", self.sampler);
        kv.push("val_seed", self.val_seed);
        kv.push("channel_mode", self.channel_mode);
    }

    fn patches(&self, path: &Path, channels: usize) -> Result<Vec<Tensor4<f32>>> {
        let images = load_dataset(path, channels, self.resize)?;
        let mut out = Vec::new();
        for (name, img) in &images {
            out.extend(grid_patches(&img.to_normalized::<f32>(), self.patch, self.stride).with_context(|| name.clone())?);
        }
        Ok(out)
    }

    /// The batch source for training on `self.data`.
    pub fn source(&self, channels: usize, train: &TrainConfig) -> Result<Box<dyn BatchSource>> {
        let seed = derive_seed(train.seed, &[1]);
        Ok(match self.sampler {
            SamplerKind::Fresh => {
                let patches = self.patches(&self.data, channels)?;
                log::info!("{} training patches", patches.len());
                Box::new(PatchSampler {
                    patches,
                    levels: train.levels.clone(),
                    crop: self.crop,
                    seed,
                    mode: self.channel_mode,
                })
            }
            SamplerKind::Fixed => {
                let images: Vec<_> = load_dataset(&self.data, channels, self.resize)?
                    .iter()
                    .map(|(_, img)| img.to_normalized::<f32>())
                    .collect();
                let pairs =
                    build_training_set(&images, self.patch, self.stride, &train.levels, seed, self.channel_mode)?;
                log::info!("{} training pairs", pairs.len());
                Box::new(PairSampler {
                    pairs,
                    crop: self.crop,
                    seed,
                })
            }
        })
    }

    /// Fixed validation pairs from `self.val`, empty without one.
    pub fn validation(&self, channels: usize, levels: &[f64]) -> Result<Vec<PatchPair>> {
        match &self.val {
            None => Ok(Vec::new()),
            Some(path) => Ok(validation_set(&self.patches(path, channels)?, levels, self.val_seed, self.channel_mode)?),
        }
    }
}

/// Images of a directory or manifest, converted to `channels`. Fails when
/// none can be read.
pub fn load_dataset(path: &Path, channels: usize, resize: Option<(usize, usize)>) -> Result<Vec<(String, ImageBuffer)>> {
    let mut manifest = DatasetManifest::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    manifest = manifest.with_channels(Some(channels));
    if resize.is_some() {
        manifest = manifest.with_resize(resize);
    }
    let images: Vec<_> = manifest
        .readable_images()
        .into_iter()
        .map(|(p, img)| (p.display().to_string(), img))
        .collect();
    if images.is_empty() {
        bail!("no readable images in {}", path.display());
    }
    Ok(images)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub eval: PathBuf,
    pub levels: Vec<f64>,
    pub seed: u64,
    pub smoothing_window: usize,
}

impl EvalConfig {
    pub fn read_kv(kv: &KvFile) -> Result<Self> {
        let eval = kv.get("eval").context("no held-out data: pass --eval or set `eval` in the settings file")?;
        let cfg = EvalConfig {
            eval: PathBuf::from(eval),
            levels: match kv.get("eval_levels") {
                Some(v) => parse_list("eval_levels", v)?,
                None => vec![0.5],
            },
            seed: kv.parse_opt("eval_seed")?.unwrap_or(0),
            smoothing_window: kv.parse_opt("smoothing_window")?.unwrap_or(200),
        };
        if cfg.levels.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            bail!("invalid value for `eval_levels`: every level must lie in (0, 1)");
        }
        if cfg.smoothing_window == 0 {
            bail!("invalid value for `smoothing_window`: must be at least 1");
        }
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvFile) {
        kv.push("eval", self.eval.display());
        kv.push("eval_levels", join_list(&self.levels));
        kv.push("eval_seed", self.seed);
        kv.push("smoothing_window", self.smoothing_window);
    }
}

/// Fully resolved settings of a training run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Experiment {
    pub fn to_kv(&self) -> KvFile {
        let mut kv = self.network.to_kv();
        self.train.write_kv(&mut kv);
        self.data.write_kv(&mut kv);
        kv
    }
}

fn merge(defaults: KvFile, config: Option<&Path>, known: &[&[&str]]) -> Result<KvFile> {
    let mut kv = defaults;
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file = KvFile::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        for (k, v) in file.entries() {
            kv.push(k, v);
        }
    }
    let all: Vec<&str> = known.iter().flat_map(|k| k.iter().copied()).collect();
    kv.check_keys(&all)?;
    Ok(kv)
}

fn resolve(kv: &KvFile) -> Result<Experiment> {
    let mut net = KvFile::new();
    for (k, v) in kv.entries() {
        if NETWORK_KEYS.contains(&k.as_str()) {
            net.push(k, v);
        }
    }
    Ok(Experiment {
        network: NetworkConfig::from_kv(&net)?,
        train: TrainConfig::read_kv(kv)?,
        data: DataConfig::read_kv(kv)?,
    })
}

/// Settings of `train`: library defaults, then the file, then flags.
pub fn resolve_train(flags: &ExperimentFlags) -> Result<Experiment> {
    let mut kv = merge(KvFile::new(), flags.config.as_deref(), &[NETWORK_KEYS, TRAIN_KEYS, DATA_KEYS])?;
    flags.overrides(&mut kv);
    resolve(&kv)
}

/// Defaults of `ablation`: a small grayscale network trained at a single
/// noise level on a reduced patch set.
pub fn ablation_defaults() -> KvFile {
    let mut kv = KvFile::new();
    kv.push("blocks", 4);
    kv.push("features", 32);
    kv.push("channels", 1);
    kv.push("seed", 7);
    kv.push("train_seed", 7);
    kv.push("steps", 5000);
    kv.push("batch_size", 8);
    kv.push("levels", "0.5");
    kv.push("patch", 70);
    kv.push("stride", 70);
    kv.push("crop", 32);
    kv.push("checkpoint_interval", 1000);
    kv.push("validation_interval", 0);
    kv
}

/// Settings of `ablation`. The median switch is set per arm, so it may not
/// be given here.
pub fn resolve_ablation(flags: &ExperimentFlags, eval: &EvalFlags) -> Result<(Experiment, EvalConfig)> {
    let mut kv = merge(
        ablation_defaults(),
        flags.config.as_deref(),
        &[NETWORK_KEYS, TRAIN_KEYS, DATA_KEYS, EVAL_KEYS],
    )?;
    flags.overrides(&mut kv);
    eval.overrides(&mut kv);
    if kv.get("median_half").is_some() {
        bail!("invalid value for `median_half`: the ablation sets it per arm");
    }
    Ok((resolve(&kv)?, EvalConfig::read_kv(&kv)?))
}
