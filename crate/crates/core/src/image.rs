//! 8-bit image buffers and PNG / binary PGM / PPM codecs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Interleaved 8-bit samples, row major, 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

/// Rounds half up and clamps to `0..=255`.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::UnsupportedImage(format!("{channels} channels (expected 1 or 3)")));
        }
        if width == 0 || height == 0 {
            return Err(Error::UnsupportedImage(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::UnsupportedImage(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Shape `(1, channels, height, width)`.
    pub fn tensor_shape(&self) -> Shape4 {
        Shape4::new(1, self.channels, self.height, self.width)
    }

    fn to_tensor_with<T: Scalar>(&self, f: impl Fn(u8) -> f64) -> Tensor4<T> {
        Tensor4::from_fn(self.tensor_shape(), |_, c, y, x| T::from_f64_lossy(f(self.get(x, y, c))))
    }

    /// Values divided by 255.
    pub fn to_normalized<T: Scalar>(&self) -> Tensor4<T> {
        self.to_tensor_with(|v| v as f64 / 255.0)
    }

    /// Raw 0..=255 intensities.
    pub fn to_levels<T: Scalar>(&self) -> Tensor4<T> {
        self.to_tensor_with(|v| v as f64)
    }

    fn from_tensor_with<T: Scalar>(t: &Tensor4<T>, item: usize, scale: f64) -> Result<Self> {
        let s = t.shape();
        if item >= s.n {
            return Err(Error::config("item", format!("index {item} out of range for batch {}", s.n)));
        }
        let mut data = Vec::with_capacity(s.c * s.plane());
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..s.c {
                    data.push(quantize(t.get(item, c, y, x).to_f64_lossy() * scale));
                }
            }
        }
        Self::new(s.w, s.h, s.c, data)
    }

    /// Quantizes a `[0, 1]` tensor item back to 8-bit.
    pub fn from_normalized<T: Scalar>(t: &Tensor4<T>, item: usize) -> Result<Self> {
        Self::from_tensor_with(t, item, 255.0)
    }

    pub fn from_levels<T: Scalar>(t: &Tensor4<T>, item: usize) -> Result<Self> {
        Self::from_tensor_with(t, item, 1.0)
    }

    /// Rec. 601 luma, `0.299 R + 0.587 G + 0.114 B`. Gray input is returned as is.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| quantize(0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64))
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Replicates a gray image into three channels.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    pub fn with_channels(&self, channels: usize) -> Result<ImageBuffer> {
        match channels {
            1 => Ok(self.to_gray()),
            3 => Ok(self.to_rgb()),
            c => Err(Error::UnsupportedImage(format!("{c} channels (expected 1 or 3)"))),
        }
    }

    /// Crops a `w`×`h` window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageBuffer> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::config(
                "crop",
                format!("{w}x{h} at ({x0}, {y0}) exceeds {}x{}", self.width, self.height),
            ));
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Self::new(w, h, self.channels, data)
    }
}

/// Bilinear resize with corner-aligned sampling: output pixel `x` samples
/// source position `x · (W_in − 1) / (W_out − 1)` (0 when `W_out = 1`), and
/// likewise for rows. Results are rounded half up.
pub fn resize_bilinear(img: &ImageBuffer, width: usize, height: usize) -> Result<ImageBuffer> {
    if width == 0 || height == 0 {
        return Err(Error::config("resize", format!("target {width}x{height} must be at least 1x1")));
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let pos = if n_out > 1 {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        };
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let ch = img.channels;
    let mut data = Vec::with_capacity(width * height * ch);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, img.height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, img.width);
            for c in 0..ch {
                let p = |xx, yy| img.get(xx, yy, c) as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                data.push(quantize(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    ImageBuffer::new(width, height, ch, data)
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedImage(format!(
            "PNG bit depth {:?} (only 8-bit is supported)",
            info.bit_depth
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::UnsupportedImage(format!(
                "PNG color type {other:?} (only gray and RGB are supported)"
            )))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let row = w * channels;
    let data = buf
        .chunks(info.line_size)
        .take(h)
        .flat_map(|line| line[..row].iter().copied())
        .collect();
    ImageBuffer::new(w, h, channels, data)
}

fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&img.data)
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Splits the netpbm header into whitespace-separated tokens, skipping
/// `#` comments, and returns them with the offset of the raster.
fn netpbm_header(bytes: &[u8]) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::UnsupportedImage("truncated netpbm header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((tokens, i + 1))
}

fn decode_netpbm(bytes: &[u8]) -> Result<ImageBuffer> {
    let (tok, offset) = netpbm_header(bytes)?;
    let channels = match tok[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::UnsupportedImage(format!("netpbm variant {m} (only binary P5/P6)"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::UnsupportedImage(format!("bad netpbm header field `{s}`")))
    };
    let (w, h, maxval) = (num(&tok[1])?, num(&tok[2])?, num(&tok[3])?);
    if maxval != 255 {
        return Err(Error::UnsupportedImage(format!("netpbm maxval {maxval} (only 255)")));
    }
    let need = w * h * channels;
    let raster = bytes.get(offset..offset + need).ok_or_else(|| {
        Error::UnsupportedImage(format!("netpbm raster truncated: need {need} bytes"))
    })?;
    ImageBuffer::new(w, h, channels, raster.to_vec())
}

fn encode_netpbm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Decodes PNG or binary PGM/PPM, detected from the file contents.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P") {
        decode_netpbm(bytes)
    } else {
        Err(Error::UnsupportedImage("unrecognized file signature".into()))
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::UnsupportedImage(m) => Error::UnsupportedImage(format!("{}: {m}", path.display())),
        Error::Png(m) => Error::Png(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Netpbm,
}

impl ImageFormat {
    /// `.pgm`/`.ppm`/`.pnm` select netpbm; anything else is PNG.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(e) if e == "pgm" || e == "ppm" || e == "pnm" => ImageFormat::Netpbm,
            _ => ImageFormat::Png,
        }
    }
}

pub fn encode_image(img: &ImageBuffer, format: ImageFormat) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Png => encode_png(img),
        ImageFormat::Netpbm => Ok(encode_netpbm(img)),
    }
}

/// Writes `img`, choosing the format from the extension.
pub fn write_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(img, ImageFormat::from_path(path))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::new(w, h, c, (0..w * h * c).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn codec_round_trips() {
        for c in [1, 3] {
            let img = random_image(13, 7, c, c as u64);
            for f in [ImageFormat::Png, ImageFormat::Netpbm] {
                let bytes = encode_image(&img, f).unwrap();
                assert_eq!(decode_image(&bytes).unwrap(), img);
            }
        }
    }

    #[test]
    fn pgm_and_png_agree() {
        let img = random_image(9, 11, 1, 5);
        let a = decode_image(&encode_image(&img, ImageFormat::Png).unwrap()).unwrap();
        let b = decode_image(&encode_image(&img, ImageFormat::Netpbm).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_sixteen_bit_png() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            enc.write_header().unwrap().write_image_data(&[0; 8]).unwrap();
        }
        let err = decode_image(&out).unwrap_err();
        assert!(matches!(err, Error::UnsupportedImage(_)), "{err}");
    }

    #[test]
    fn netpbm_header_comments_and_errors() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.data(), &[7, 9]);
        assert!(decode_image(b"P5\n2 2\n255\n\x01").is_err());
        assert!(decode_image(b"P2\n1 1\n255\n7").is_err());
        assert!(decode_image(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_image(b"GIF89a").is_err());
    }

    #[test]
    fn normalized_round_trip_is_exact() {
        let img = random_image(16, 16, 3, 9);
        let t = img.to_normalized::<f32>();
        assert_eq!(ImageBuffer::from_normalized(&t, 0).unwrap(), img);
        let t = img.to_normalized::<f64>();
        assert_eq!(ImageBuffer::from_normalized(&t, 0).unwrap(), img);
        assert_eq!(ImageBuffer::from_levels(&img.to_levels::<f64>(), 0).unwrap(), img);
    }

    #[test]
    fn quantize_rounds_half_up_and_clamps() {
        assert_eq!(quantize(0.5), 1);
        assert_eq!(quantize(1.49), 1);
        assert_eq!(quantize(254.5), 255);
        assert_eq!(quantize(300.0), 255);
        assert_eq!(quantize(-4.0), 0);
        assert_eq!(quantize(f64::NAN), 0);
    }

    #[test]
    fn luma_weights() {
        let img = ImageBuffer::new(3, 1, 3, vec![255, 0, 0, 0, 255, 0, 0, 0, 255]).unwrap();
        assert_eq!(img.to_gray().data(), &[76, 150, 29]);
        let g = ImageBuffer::filled(2, 2, 1, 40).unwrap();
        assert_eq!(g.to_rgb().to_gray(), g);
    }

    #[test]
    fn resize_properties() {
        let img = random_image(10, 6, 3, 2);
        assert_eq!(resize_bilinear(&img, 10, 6).unwrap(), img);
        let flat = ImageBuffer::filled(5, 4, 1, 77).unwrap();
        let big = resize_bilinear(&flat, 23, 17).unwrap();
        assert!(big.data().iter().all(|&v| v == 77));
        // ramp 0, 20, ..., 180 upsampled to 19 samples stays linear: 0, 10, ..., 180
        let ramp = ImageBuffer::new(10, 1, 1, (0..10).map(|i| (i * 20) as u8).collect()).unwrap();
        let up = resize_bilinear(&ramp, 19, 1).unwrap();
        for (i, &v) in up.data().iter().enumerate() {
            assert!((v as i32 - (i * 10) as i32).abs() <= 1, "{i}: {v}");
        }
        assert_eq!(up.get(0, 0, 0), 0);
        assert_eq!(up.get(18, 0, 0), 180);
        assert!(resize_bilinear(&img, 0, 3).is_err());
    }

    #[test]
    fn crop_bounds() {
        let img = random_image(8, 5, 1, 3);
        let c = img.crop(2, 1, 4, 3).unwrap();
        assert_eq!(c.get(0, 0, 0), img.get(2, 1, 0));
        assert_eq!(c.get(3, 2, 0), img.get(5, 3, 0));
        assert!(img.crop(5, 0, 4, 1).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(6, 4, 3, 8);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            write_image(&img, &p).unwrap();
            assert_eq!(read_image(&p).unwrap(), img);
        }
        let missing = read_image(dir.path().join("nope.png")).unwrap_err();
        assert!(missing.to_string().contains("nope.png"));
    }
}
