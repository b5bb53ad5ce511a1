//! The fully convolutional denoiser: a lifting convolution, leading median
//! layers, residual blocks with a median layer after each block of the
//! first half, and an output convolution predicting the clean image.
//!
//! Layer order for `B` blocks with medians enabled:
//!
//! ```text
//! lift · median×leading · (block · median)×⌈B/2⌉ · block×(B−⌈B/2⌉) · head
//! ```
//!
//! The lift is `conv3x3(C→F) + relu`; a block computes
//! `relu(x + bn(conv(relu(bn(conv(x))))))` (the skip is dropped in the
//! plain conv-relu variant); the head is `conv3x3(F→C)` with no activation.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::filters::median_filter_2d;
use crate::median::{Border, MedianLayerSpec};
use crate::ops::{self, Mode, RunningStats, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{Scalar, Shape4, Tensor4};

pub const CONV_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub blocks: usize,
    pub features: usize,
    pub median_kernel: usize,
    pub leading_medians: usize,
    /// When false the network has no median layers at all.
    pub median_half: bool,
    pub channels: usize,
    pub seed: u64,
    /// Skip connections inside blocks; false gives the plain conv-relu stack.
    pub residual: bool,
    /// Apply the leading medians to the raw input instead of lifted features.
    pub medians_on_input: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            blocks: 16,
            features: 64,
            median_kernel: 3,
            leading_medians: 2,
            median_half: true,
            channels: 3,
            seed: 0,
            residual: true,
            medians_on_input: false,
        }
    }
}

/// Keys read by [`NetworkConfig::from_kv`].
pub const NETWORK_KEYS: &[&str] = &[
    "blocks",
    "features",
    "median_kernel",
    "leading_medians",
    "median_half",
    "channels",
    "seed",
    "residual",
    "medians_on_input",
    "init",
];

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::config("blocks", format!("must be at least 2, got {}", self.blocks)));
        }
        if self.features == 0 {
            return Err(Error::config("features", "must be at least 1"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config("channels", format!("must be 1 or 3, got {}", self.channels)));
        }
        MedianLayerSpec::new(self.median_kernel)
            .map_err(|_| Error::config("median_kernel", format!("must be odd and >= 3, got {}", self.median_kernel)))?;
        Ok(())
    }

    /// Number of blocks followed by a median layer.
    pub fn median_blocks(&self) -> usize {
        if self.median_half {
            self.blocks.div_ceil(2)
        } else {
            0
        }
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.push("blocks", self.blocks);
        kv.push("features", self.features);
        kv.push("median_kernel", self.median_kernel);
        kv.push("leading_medians", self.leading_medians);
        kv.push("median_half", self.median_half);
        kv.push("channels", self.channels);
        kv.push("seed", self.seed);
        kv.push("residual", self.residual);
        kv.push("medians_on_input", self.medians_on_input);
        kv.push("init", "he_normal_fan_in");
        kv
    }

    /// Reads a config, taking defaults for absent keys.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.check_keys(NETWORK_KEYS)?;
        let d = NetworkConfig::default();
        let cfg = NetworkConfig {
            blocks: kv.parse_opt("blocks")?.unwrap_or(d.blocks),
            features: kv.parse_opt("features")?.unwrap_or(d.features),
            median_kernel: kv.parse_opt("median_kernel")?.unwrap_or(d.median_kernel),
            leading_medians: kv.parse_opt("leading_medians")?.unwrap_or(d.leading_medians),
            median_half: kv.parse_opt("median_half")?.unwrap_or(d.median_half),
            channels: kv.parse_opt("channels")?.unwrap_or(d.channels),
            seed: kv.parse_opt("seed")?.unwrap_or(d.seed),
            residual: kv.parse_opt("residual")?.unwrap_or(d.residual),
            medians_on_input: kv.parse_opt("medians_on_input")?.unwrap_or(d.medians_on_input),
        };
        if let Some(init) = kv.get("init") {
            if init != "he_normal_fan_in" {
                return Err(Error::config("init", format!("unknown scheme `{init}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (c, f, k2) = (self.channels, self.features, CONV_KERNEL * CONV_KERNEL);
        let lift = c * f * k2 + f;
        let block = 2 * (f * f * k2 + f) + 2 * 2 * f;
        let head = f * c * k2 + c;
        lift + self.blocks * block + head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NormParams {
    scale: ParamId,
    shift: ParamId,
    stats: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualBlock {
    conv1: ConvParams,
    bn1: NormParams,
    conv2: ConvParams,
    bn2: NormParams,
    skip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Conv { params: ConvParams, relu: bool },
    Median(MedianLayerSpec),
    Block(ResidualBlock),
}

/// Coarse layer kinds, for inspecting a built network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Median,
    Block,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "conv",
            LayerKind::Median => "median",
            LayerKind::Block => "block",
        })
    }
}

/// Built network: configuration, named parameters, batchnorm statistics.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    config: NetworkConfig,
    params: ParamStore<T>,
    stats: Vec<(String, RunningStats<T>)>,
    layers: Vec<Layer>,
}

struct Builder<T: Scalar> {
    seed: u64,
    params: ParamStore<T>,
    stats: Vec<(String, RunningStats<T>)>,
}

impl<T: Scalar> Builder<T> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<ConvParams> {
        let shape = Shape4::new(c_out, c_in, CONV_KERNEL, CONV_KERNEL);
        let std = (2.0 / (c_in * CONV_KERNEL * CONV_KERNEL) as f64).sqrt();
        let mut rng = seeded(derive_seed(self.seed, &[self.params.len() as u64]));
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let weight = self.params.add(format!("{name}.weight"), Tensor4::from_vec(shape, data)?)?;
        let bias = self.params.add(format!("{name}.bias"), Tensor4::zeros(Shape4::new(1, c_out, 1, 1)))?;
        Ok(ConvParams { weight, bias })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<NormParams> {
        let shape = Shape4::new(1, c, 1, 1);
        let scale = self.params.add(format!("{name}.scale"), Tensor4::ones(shape))?;
        let shift = self.params.add(format!("{name}.shift"), Tensor4::zeros(shape))?;
        self.stats
            .push((name.to_string(), RunningStats::new(c, DEFAULT_MOMENTUM, DEFAULT_EPSILON)));
        Ok(NormParams {
            scale,
            shift,
            stats: self.stats.len() - 1,
        })
    }
}

/// Builds the network described by `config`, initializing weights from its
/// seed (He-normal fan-in for convolutions, zero biases, unit batchnorm
/// scale and zero shift).
pub fn build_network<T: Scalar>(config: &NetworkConfig) -> Result<Model<T>> {
    config.validate()?;
    let spec = MedianLayerSpec::new(config.median_kernel)?;
    let leading = if config.median_half { config.leading_medians } else { 0 };
    let f = config.features;
    let mut b = Builder {
        seed: config.seed,
        params: ParamStore::new(),
        stats: Vec::new(),
    };
    let mut layers = Vec::new();
    if config.medians_on_input {
        layers.extend(std::iter::repeat(Layer::Median(spec)).take(leading));
    }
    layers.push(Layer::Conv {
        params: b.conv("lift", config.channels, f)?,
        relu: true,
    });
    if !config.medians_on_input {
        layers.extend(std::iter::repeat(Layer::Median(spec)).take(leading));
    }
    for i in 0..config.blocks {
        let name = format!("block{i}");
        let block = ResidualBlock {
            conv1: b.conv(&format!("{name}.conv1"), f, f)?,
            bn1: b.norm(&format!("{name}.bn1"), f)?,
            conv2: b.conv(&format!("{name}.conv2"), f, f)?,
            bn2: b.norm(&format!("{name}.bn2"), f)?,
            skip: config.residual,
        };
        layers.push(Layer::Block(block));
        if i < config.median_blocks() {
            layers.push(Layer::Median(spec));
        }
    }
    layers.push(Layer::Conv {
        params: b.conv("head", f, config.channels)?,
        relu: false,
    });
    Ok(Model {
        config: config.clone(),
        params: b.params,
        stats: b.stats,
        layers,
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Batchnorm running statistics keyed by layer name (`block0.bn1`, ...).
    pub fn running_stats(&self) -> &[(String, RunningStats<T>)] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [(String, RunningStats<T>)] {
        &mut self.stats
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { .. } => LayerKind::Conv,
                Layer::Median(_) => LayerKind::Median,
                Layer::Block(_) => LayerKind::Block,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, shape: Shape4) -> Result<()> {
        if shape.c != self.config.channels {
            return Err(Error::ShapeMismatch {
                op: "network input channels",
                left: shape,
                right: shape.with_channels(self.config.channels),
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. Train mode updates the running
    /// statistics; no clamping is applied.
    pub fn forward_tape(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let mut h = x;
        for layer in &self.layers {
            h = match *layer {
                Layer::Conv { params, relu } => {
                    let w = tape.param(&self.params, params.weight);
                    let b = tape.param(&self.params, params.bias);
                    let y = tape.conv2d(h, w, b)?;
                    if relu {
                        tape.relu(y)?
                    } else {
                        y
                    }
                }
                Layer::Median(spec) => tape.median(h, spec)?,
                Layer::Block(blk) => {
                    let mut conv_bn = |tape: &mut Tape<T>, input: Var, c: ConvParams, n: NormParams| -> Result<Var> {
                        let w = tape.param(&self.params, c.weight);
                        let b = tape.param(&self.params, c.bias);
                        let y = tape.conv2d(input, w, b)?;
                        let g = tape.param(&self.params, n.scale);
                        let s = tape.param(&self.params, n.shift);
                        tape.batchnorm(y, g, s, mode, &mut self.stats[n.stats].1)
                    };
                    let a = conv_bn(tape, h, blk.conv1, blk.bn1)?;
                    let a = tape.relu(a)?;
                    let a = conv_bn(tape, a, blk.conv2, blk.bn2)?;
                    let a = if blk.skip { tape.add(h, a)? } else { a };
                    tape.relu(a)?
                }
            };
        }
        Ok(h)
    }

    /// Eval-mode inference without a tape; output clamped to `[0, 1]`.
    /// Running statistics must be initialized.
    pub fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x.shape())?;
        let p = |id: ParamId| &self.params.get(id).value;
        let conv = |input: &Tensor4<T>, c: ConvParams| ops::conv2d(input, p(c.weight), p(c.bias));
        let norm = |input: &Tensor4<T>, n: NormParams| -> Result<Tensor4<T>> {
            let mut stats = self.stats[n.stats].1.clone();
            Ok(ops::batchnorm(input, p(n.scale), p(n.shift), Mode::Eval, &mut stats)?.0)
        };
        let mut h = x.clone();
        for layer in &self.layers {
            h = match *layer {
                Layer::Conv { params, relu } => {
                    let y = conv(&h, params)?;
                    if relu {
                        ops::relu(&y)
                    } else {
                        y
                    }
                }
                Layer::Median(spec) => median_filter_2d(&h, spec.kernel(), Border::Zero)?,
                Layer::Block(blk) => {
                    let a = ops::relu(&norm(&conv(&h, blk.conv1)?, blk.bn1)?);
                    let a = norm(&conv(&a, blk.conv2)?, blk.bn2)?;
                    let a = if blk.skip { ops::add(&h, &a)? } else { a };
                    ops::relu(&a)
                }
            };
        }
        let (lo, hi) = (T::zero(), T::one());
        Ok(h.map(|v| if v < lo { lo } else if v > hi { hi } else { v }))
    }

    /// Train mode runs the taped forward (updating running statistics) and
    /// returns the raw output; eval mode is [`infer`](Self::infer).
    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        match mode {
            Mode::Eval => self.infer(x),
            Mode::Train => {
                let mut tape = Tape::new();
                let v = tape.input(x.clone());
                let out = self.forward_tape(&mut tape, v, mode)?;
                Ok(tape.value(out).clone())
            }
        }
    }

    /// Whether every batchnorm layer has usable running statistics.
    pub fn stats_initialized(&self) -> bool {
        self.stats.iter().all(|(_, s)| s.is_initialized())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::tensor_uniform;
    use LayerKind::*;

    fn tiny(blocks: usize) -> NetworkConfig {
        NetworkConfig {
            blocks,
            features: 4,
            channels: 1,
            seed: 3,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn layer_order() {
        let m = build_network::<f32>(&tiny(4)).unwrap();
        assert_eq!(
            m.layer_kinds(),
            vec![Conv, Median, Median, Block, Median, Block, Median, Block, Block, Conv]
        );
        let m = build_network::<f32>(&NetworkConfig { blocks: 5, ..tiny(5) }).unwrap();
        assert_eq!(m.layer_kinds().iter().filter(|&&k| k == Median).count(), 2 + 3);
        let without = build_network::<f32>(&NetworkConfig { median_half: false, ..tiny(4) }).unwrap();
        assert_eq!(without.layer_kinds(), vec![Conv, Block, Block, Block, Block, Conv]);
        let on_input = build_network::<f32>(&NetworkConfig { medians_on_input: true, ..tiny(2) }).unwrap();
        assert_eq!(on_input.layer_kinds(), vec![Median, Median, Conv, Block, Median, Block, Conv]);
    }

    #[test]
    fn parameter_count_closed_form() {
        for b in [2, 4, 16] {
            for c in [1, 3] {
                let cfg = NetworkConfig { blocks: b, features: 8, channels: c, ..NetworkConfig::default() };
                let m = build_network::<f32>(&cfg).unwrap();
                // lift + B blocks (2 convs with bias, 2 norms) + head
                let f = 8;
                let expect = (c * f * 9 + f) + b * (2 * (f * f * 9 + f) + 4 * f) + (f * c * 9 + c);
                assert_eq!(m.param_count(), expect);
                assert_eq!(cfg.param_count(), expect);
            }
        }
        let without = NetworkConfig { median_half: false, ..tiny(4) };
        assert_eq!(without.param_count(), tiny(4).param_count());
    }

    #[test]
    fn names_are_stable_and_seeded() {
        let a = build_network::<f32>(&tiny(2)).unwrap();
        let b = build_network::<f32>(&tiny(2)).unwrap();
        let names: Vec<&str> = a.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[..4], ["lift.weight", "lift.bias", "block0.conv1.weight", "block0.conv1.bias"]);
        assert_eq!(names.last(), Some(&"head.bias"));
        for (p, q) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(p.value, q.value);
        }
        let c = build_network::<f32>(&NetworkConfig { seed: 4, ..tiny(2) }).unwrap();
        assert_ne!(a.params().iter().next().unwrap().value, c.params().iter().next().unwrap().value);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        for (cfg, field) in [
            (NetworkConfig { blocks: 1, ..tiny(2) }, "blocks"),
            (NetworkConfig { features: 0, ..tiny(2) }, "features"),
            (NetworkConfig { median_kernel: 4, ..tiny(2) }, "median_kernel"),
            (NetworkConfig { channels: 2, ..tiny(2) }, "channels"),
        ] {
            let err = build_network::<f32>(&cfg).unwrap_err().to_string();
            assert!(err.contains(field), "{err}");
        }
    }

    #[test]
    fn config_round_trip() {
        let cfg = NetworkConfig { blocks: 7, features: 12, seed: 99, residual: false, ..NetworkConfig::default() };
        let back = NetworkConfig::from_kv(&KvFile::parse(&cfg.to_kv().to_string()).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(NetworkConfig::from_kv(&KvFile::parse("blokcs = 2").unwrap()).is_err());
    }

    #[test]
    fn any_size_forward() {
        let mut m = build_network::<f32>(&tiny(2)).unwrap();
        for (h, w) in [(3, 3), (7, 10), (21, 13)] {
            let x = tensor_uniform::<f32>(Shape4::new(2, 1, h, w), 1, 0.0, 1.0);
            let y = m.forward(&x, Mode::Train).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.is_finite());
            let e = m.infer(&x).unwrap();
            assert_eq!(e.shape(), x.shape());
            assert!(e.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let bad = Tensor4::<f32>::zeros(Shape4::new(1, 3, 8, 8));
        assert!(m.forward(&bad, Mode::Train).is_err());
    }

    #[test]
    fn eval_needs_statistics() {
        let m = build_network::<f32>(&tiny(2)).unwrap();
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 1, 5, 5));
        assert!(matches!(m.infer(&x), Err(Error::RunningStatsUninitialized)));
    }

    #[test]
    fn eval_is_pure() {
        let mut m = build_network::<f32>(&tiny(2)).unwrap();
        let x = tensor_uniform::<f32>(Shape4::new(2, 1, 9, 9), 2, 0.0, 1.0);
        m.forward(&x, Mode::Train).unwrap();
        let before: Vec<_> = m.running_stats().iter().map(|(_, s)| s.clone()).collect();
        let a = m.infer(&x).unwrap();
        let b = m.infer(&x).unwrap();
        assert_eq!(a, b);
        let after: Vec<_> = m.running_stats().iter().map(|(_, s)| s.clone()).collect();
        assert_eq!(before, after);
    }
}
