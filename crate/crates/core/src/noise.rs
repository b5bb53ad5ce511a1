//! Salt-and-pepper contamination.
//!
//! Every sampling unit draws two uniforms `r1, r2 ∈ [0, 1)`. If `r1 < p` the
//! unit becomes pepper when `r2 < 0.5` and salt otherwise; it is left
//! untouched otherwise. Both draws are taken for every unit so the stream
//! position depends only on the unit index. Units are visited in raster
//! order: `(n, c, y, x)` in per-channel mode, `(n, y, x)` in per-pixel mode
//! where one pair of draws decides all channels of a pixel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::seeded;
use crate::tensor::{Scalar, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelMode {
    /// Each channel of each pixel is contaminated independently.
    #[default]
    PerChannel,
    /// All channels of a pixel are hit together with the same extreme.
    PerPixel,
}

impl FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_channel" | "per-channel" => Ok(ChannelMode::PerChannel),
            "per_pixel" | "per-pixel" => Ok(ChannelMode::PerPixel),
            other => Err(Error::config("channel_mode", format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelMode::PerChannel => "per_channel",
            ChannelMode::PerPixel => "per_pixel",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    level: f64,
    channel_mode: ChannelMode,
    seed: u64,
    salt: f64,
    pepper: f64,
}

impl NoiseSpec {
    /// Normalized extremes (salt 1, pepper 0), per-channel mode.
    pub fn new(level: f64, seed: u64) -> Result<Self> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::config("level", format!("must lie in (0, 1), got {level}")));
        }
        Ok(NoiseSpec {
            level,
            channel_mode: ChannelMode::PerChannel,
            seed,
            salt: 1.0,
            pepper: 0.0,
        })
    }

    pub fn with_extremes(mut self, salt: f64, pepper: f64) -> Result<Self> {
        if !(salt > pepper) {
            return Err(Error::config("salt", format!("salt {salt} must exceed pepper {pepper}")));
        }
        self.salt = salt;
        self.pepper = pepper;
        Ok(self)
    }

    /// Extremes 255 and 0.
    pub fn eight_bit(self) -> Self {
        NoiseSpec {
            salt: 255.0,
            pepper: 0.0,
            ..self
        }
    }

    pub fn with_channel_mode(mut self, mode: ChannelMode) -> Self {
        self.channel_mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn channel_mode(&self) -> ChannelMode {
        self.channel_mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn salt(&self) -> f64 {
        self.salt
    }

    pub fn pepper(&self) -> f64 {
        self.pepper
    }
}

/// What happened to one sampling unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Impulse {
    Clean,
    Salt,
    Pepper,
}

fn draw(rng: &mut impl Rng, p: f64) -> Impulse {
    let r1: f64 = rng.gen();
    let r2: f64 = rng.gen();
    if r1 >= p {
        Impulse::Clean
    } else if r2 < 0.5 {
        Impulse::Pepper
    } else {
        Impulse::Salt
    }
}

/// Contaminates `image`, returning the result and the per-unit outcomes.
/// In per-pixel mode the mask has one entry per `(n, y, x)`.
pub fn apply_salt_pepper_with_mask<T: Scalar>(image: &Tensor4<T>, spec: &NoiseSpec) -> (Tensor4<T>, Vec<Impulse>) {
    let mut rng = seeded(spec.seed);
    let (salt, pepper) = (T::from_f64_lossy(spec.salt), T::from_f64_lossy(spec.pepper));
    let mut out = image.clone();
    let s = image.shape();
    match spec.channel_mode {
        ChannelMode::PerChannel => {
            let mut mask = Vec::with_capacity(out.len());
            for v in out.data_mut() {
                let hit = draw(&mut rng, spec.level);
                match hit {
                    Impulse::Clean => {}
                    Impulse::Salt => *v = salt,
                    Impulse::Pepper => *v = pepper,
                }
                mask.push(hit);
            }
            (out, mask)
        }
        ChannelMode::PerPixel => {
            let mut mask = Vec::with_capacity(s.n * s.plane());
            for n in 0..s.n {
                for i in 0..s.plane() {
                    let hit = draw(&mut rng, spec.level);
                    let value = match hit {
                        Impulse::Clean => None,
                        Impulse::Salt => Some(salt),
                        Impulse::Pepper => Some(pepper),
                    };
                    if let Some(v) = value {
                        for c in 0..s.c {
                            out.plane_mut(n, c)[i] = v;
                        }
                    }
                    mask.push(hit);
                }
            }
            (out, mask)
        }
    }
}

pub fn apply_salt_pepper<T: Scalar>(image: &Tensor4<T>, spec: &NoiseSpec) -> Tensor4<T> {
    apply_salt_pepper_with_mask(image, spec).0
}

/// Contaminates a 1D signal; the channel mode is irrelevant here.
pub fn apply_salt_pepper_1d(signal: &[f64], spec: &NoiseSpec) -> Vec<f64> {
    let mut rng = seeded(spec.seed);
    signal
        .iter()
        .map(|&v| match draw(&mut rng, spec.level) {
            Impulse::Clean => v,
            Impulse::Salt => spec.salt,
            Impulse::Pepper => spec.pepper,
        })
        .collect()
}

/// PSNR of the contaminated image against `clean`. The value range
/// `[pepper, salt]` is mapped onto 8-bit before scoring.
pub fn noisy_psnr_reference<T: Scalar>(clean: &Tensor4<T>, spec: &NoiseSpec) -> Result<f64> {
    let noisy = apply_salt_pepper(clean, spec);
    let scale = metrics::PEAK / (spec.salt - spec.pepper);
    Ok(metrics::psnr_from_mse(metrics::mse(&noisy, clean)? * scale * scale))
}
