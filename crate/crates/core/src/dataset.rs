//! Image manifests, patch extraction and deterministic batch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::image::{read_image, resize_bilinear, ImageBuffer};
use crate::noise::{apply_salt_pepper, ChannelMode, NoiseSpec};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor4;

/// Ordered image list with an optional resize target and channel count.
///
/// Text form (see [`crate::config`]):
///
/// ```text
/// name = heldout
/// resize = 200x200
/// channels = 1
/// image = astronaut.png
/// image = coffee.png
/// ```
///
/// Relative image paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub images: Vec<PathBuf>,
    pub resize: Option<(usize, usize)>,
    pub channels: Option<usize>,
}

/// Parses `WIDTHxHEIGHT`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config("resize", format!("expected WIDTHxHEIGHT, got `{s}`"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn is_image_path(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm" | "ppm" | "pnm")
    )
}

/// An image read through a manifest; unreadable entries keep their error.
#[derive(Debug)]
pub struct LoadedImage {
    pub path: PathBuf,
    pub image: Result<ImageBuffer>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        kv.check_keys(&["name", "resize", "channels", "image"])?;
        let channels = kv.parse_opt::<usize>("channels")?;
        if let Some(c) = channels {
            if c != 1 && c != 3 {
                return Err(Error::config("channels", format!("must be 1 or 3, got {c}")));
            }
        }
        Ok(DatasetManifest {
            name: kv.get("name").unwrap_or("dataset").to_string(),
            images: kv
                .get_all("image")
                .map(|p| {
                    let p = Path::new(p);
                    if p.is_absolute() {
                        p.to_path_buf()
                    } else {
                        base_dir.join(p)
                    }
                })
                .collect(),
            resize: kv.get("resize").map(parse_size).transpose()?,
            channels,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// All PNG/PGM/PPM files in `dir`, sorted by file name.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut images: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_path(p))
            .collect();
        images.sort();
        Ok(DatasetManifest {
            name: dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("dataset")
                .to_string(),
            images,
            resize: None,
            channels: None,
        })
    }

    /// A manifest file, or a directory of images.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.is_dir() {
            Self::from_dir(path)
        } else {
            Self::load(path)
        }
    }

    pub fn with_resize(mut self, size: Option<(usize, usize)>) -> Self {
        self.resize = size;
        self
    }

    pub fn with_channels(mut self, channels: Option<usize>) -> Self {
        self.channels = channels;
        self
    }

    /// Reads every image in manifest order, applying channel conversion and
    /// the resize target.
    pub fn load_images(&self) -> Vec<LoadedImage> {
        self.images
            .iter()
            .map(|p| LoadedImage {
                path: p.clone(),
                image: read_image(p).and_then(|img| {
                    let img = match self.channels {
                        Some(c) => img.with_channels(c)?,
                        None => img,
                    };
                    match self.resize {
                        Some((w, h)) => resize_bilinear(&img, w, h),
                        None => Ok(img),
                    }
                }),
            })
            .collect()
    }

    /// Like [`load_images`](Self::load_images) but skips unreadable files
    /// with a warning.
    pub fn readable_images(&self) -> Vec<(PathBuf, ImageBuffer)> {
        self.load_images()
            .into_iter()
            .filter_map(|l| match l.image {
                Ok(img) => Some((l.path, img)),
                Err(e) => {
                    log::warn!("skipping {}: {e}", l.path.display());
                    None
                }
            })
            .collect()
    }
}

/// Top-left corners of a non-overlapping-by-default grid of patches.
pub fn grid_positions(height: usize, width: usize, patch: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || stride == 0 {
        return Err(Error::config("patch", "patch size and stride must be positive"));
    }
    if patch > height || patch > width {
        return Err(Error::PatchTooLarge { patch, width, height });
    }
    let ys = (0..=height - patch).step_by(stride);
    Ok(ys
        .flat_map(|y| (0..=width - patch).step_by(stride).map(move |x| (y, x)))
        .collect())
}

/// Grid patches of every item in `image`, in raster order.
pub fn grid_patches(image: &Tensor4<f32>, patch: usize, stride: usize) -> Result<Vec<Tensor4<f32>>> {
    let s = image.shape();
    let pos = grid_positions(s.h, s.w, patch, stride)?;
    let mut out = Vec::with_capacity(pos.len() * s.n);
    for n in 0..s.n {
        let item = Tensor4::from_vec(s.with_batch(1), image.item(n).to_vec())?;
        for &(y, x) in &pos {
            out.push(item.crop(y, x, patch, patch)?);
        }
    }
    Ok(out)
}

/// A contaminated patch and its clean source.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub noisy: Tensor4<f32>,
    pub clean: Tensor4<f32>,
    pub level: f64,
}

/// Pairs every grid patch of every image with one contaminated copy per
/// level. Order: image, then patch position, then level. The noise seed of
/// each pair is derived from `(seed, image, position, level index)`.
pub fn build_training_set(
    images: &[Tensor4<f32>],
    patch: usize,
    stride: usize,
    levels: &[f64],
    seed: u64,
    mode: ChannelMode,
) -> Result<Vec<PatchPair>> {
    let specs = levels
        .iter()
        .map(|&p| Ok(NoiseSpec::new(p, 0)?.with_channel_mode(mode)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (i, img) in images.iter().enumerate() {
        for (j, clean) in grid_patches(img, patch, stride)?.into_iter().enumerate() {
            for (l, spec) in specs.iter().enumerate() {
                let spec = spec.with_seed(derive_seed(seed, &[i as u64, j as u64, l as u64]));
                out.push(PatchPair {
                    noisy: apply_salt_pepper(&clean, &spec),
                    clean: clean.clone(),
                    level: spec.level(),
                });
            }
        }
    }
    Ok(out)
}

/// A training batch, stacked along the batch axis.
#[derive(Debug, Clone)]
pub struct Batch {
    pub noisy: Tensor4<f32>,
    pub clean: Tensor4<f32>,
}

/// Supplies the batch for a given step. Implementations must be pure in
/// `step` so that resumed runs see the same data as uninterrupted ones.
pub trait BatchSource {
    fn batch(&self, step: u64, size: usize) -> Result<Batch>;
}

fn random_crop(rng: &mut impl Rng, t: &Tensor4<f32>, crop: Option<usize>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    match crop {
        None => Ok((0, 0, s.h.min(s.w))),
        Some(c) if c > s.h || c > s.w => Err(Error::PatchTooLarge {
            patch: c,
            width: s.w,
            height: s.h,
        }),
        Some(c) => Ok((rng.gen_range(0..=s.h - c), rng.gen_range(0..=s.w - c), c)),
    }
}

/// Samples pre-built pairs uniformly, with an optional random crop.
#[derive(Debug, Clone)]
pub struct PairSampler {
    pub pairs: Vec<PatchPair>,
    pub crop: Option<usize>,
    pub seed: u64,
}

impl BatchSource for PairSampler {
    fn batch(&self, step: u64, size: usize) -> Result<Batch> {
        if self.pairs.is_empty() {
            return Err(Error::config("dataset", "no training pairs"));
        }
        let mut rng = seeded(derive_seed(self.seed, &[step]));
        let mut noisy = Vec::with_capacity(size);
        let mut clean = Vec::with_capacity(size);
        for _ in 0..size {
            let p = &self.pairs[rng.gen_range(0..self.pairs.len())];
            let (y, x, c) = random_crop(&mut rng, &p.clean, self.crop)?;
            noisy.push(p.noisy.crop(y, x, c, c)?);
            clean.push(p.clean.crop(y, x, c, c)?);
        }
        Ok(Batch {
            noisy: Tensor4::stack(&noisy)?,
            clean: Tensor4::stack(&clean)?,
        })
    }
}

/// Draws a fresh noise realization for every sample: a uniformly chosen
/// clean patch, a random crop, and a level picked uniformly from `levels`.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    pub patches: Vec<Tensor4<f32>>,
    pub levels: Vec<f64>,
    pub crop: Option<usize>,
    pub seed: u64,
    pub mode: ChannelMode,
}

impl BatchSource for PatchSampler {
    fn batch(&self, step: u64, size: usize) -> Result<Batch> {
        if self.patches.is_empty() || self.levels.is_empty() {
            return Err(Error::config("dataset", "no training patches or noise levels"));
        }
        let mut rng = seeded(derive_seed(self.seed, &[step]));
        let mut noisy = Vec::with_capacity(size);
        let mut clean = Vec::with_capacity(size);
        for _ in 0..size {
            let p = &self.patches[rng.gen_range(0..self.patches.len())];
            let (y, x, c) = random_crop(&mut rng, p, self.crop)?;
            let level = self.levels[rng.gen_range(0..self.levels.len())];
            let spec = NoiseSpec::new(level, rng.gen())?.with_channel_mode(self.mode);
            let cl = p.crop(y, x, c, c)?;
            noisy.push(apply_salt_pepper(&cl, &spec));
            clean.push(cl);
        }
        Ok(Batch {
            noisy: Tensor4::stack(&noisy)?,
            clean: Tensor4::stack(&clean)?,
        })
    }
}

/// Fixed validation pairs: every patch at every level, with seeds derived
/// from `seed`, so scores are comparable across runs.
pub fn validation_set(
    patches: &[Tensor4<f32>],
    levels: &[f64],
    seed: u64,
    mode: ChannelMode,
) -> Result<Vec<PatchPair>> {
    let mut out = Vec::with_capacity(patches.len() * levels.len());
    for (i, clean) in patches.iter().enumerate() {
        for (l, &level) in levels.iter().enumerate() {
            let spec = NoiseSpec::new(level, derive_seed(seed, &[i as u64, l as u64]))?.with_channel_mode(mode);
            out.push(PatchPair {
                noisy: apply_salt_pepper(clean, &spec),
                clean: clean.clone(),
                level,
            });
        }
    }
    Ok(out)
}
