//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "MEDNETCK"
//! version    u32       FORMAT_VERSION
//! config     u32 len + UTF-8 key/value text (NetworkConfig)
//! state      u32 len + UTF-8 key/value text (step, optimizer, batchnorm flags)
//! count      u32       number of tensors
//! tensor*    u32 name len, name, u8 dtype tag (1 = f32, 2 = f64),
//!            4 × u32 shape (n, c, h, w), values
//! checksum   u64       FNV-1a over every preceding byte
//! ```
//!
//! Tensor names are the parameter names, `<norm>.running_mean` /
//! `<norm>.running_var` for batchnorm statistics, and `optim.first.<param>` /
//! `optim.second.<param>` for optimizer moments.

use std::fs;
use std::path::Path;

use crate::config::{join_list, parse_list, KvFile};
use crate::error::{Error, Result};
use crate::network::{build_network, Model, NetworkConfig};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::{DType, Scalar, Shape4, Tensor4};

pub const MAGIC: &[u8; 8] = b"MEDNETCK";
pub const FORMAT_VERSION: u32 = 1;

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar = f32> {
    pub model: Model<T>,
    pub step: u64,
    pub optimizer: Option<Optimizer<T>>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor4<T>) {
    put_text(out, name);
    out.push(T::DTYPE.tag());
    for d in t.shape().dims() {
        put_u32(out, d);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serializes a model, its training step and optional optimizer state.
pub fn encode_checkpoint<T: Scalar>(model: &Model<T>, step: u64, optimizer: Option<&Optimizer<T>>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_text(&mut out, &model.config().to_kv().to_string());

    let mut state = KvFile::new();
    state.push("step", step);
    let flags: Vec<u8> = model
        .running_stats()
        .iter()
        .map(|(_, s)| s.is_initialized() as u8)
        .collect();
    state.push("stats_initialized", join_list(&flags));
    if let Some(opt) = optimizer {
        opt.config.write_kv(&mut state);
        state.push("optimizer_steps", opt.steps);
    }
    put_text(&mut out, &state.to_string());

    let params = model.params();
    let mut tensors: Vec<(String, &Tensor4<T>)> = params.iter().map(|p| (p.name.clone(), &p.value)).collect();
    for (name, s) in model.running_stats() {
        tensors.push((format!("{name}.running_mean"), &s.mean));
        tensors.push((format!("{name}.running_var"), &s.var));
    }
    if let Some(opt) = optimizer {
        for (p, m) in params.iter().zip(&opt.first) {
            tensors.push((format!("optim.first.{}", p.name), m));
        }
        for (p, v) in params.iter().zip(&opt.second) {
            tensors.push((format!("optim.second.{}", p.name), v));
        }
    }
    put_u32(&mut out, tensors.len());
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t);
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| corrupt("text block is not UTF-8"))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor4<T>)> {
        let name = self.text()?.to_string();
        let tag = self.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| corrupt(format!("unknown dtype tag {tag} for `{name}`")))?;
        if dtype != T::DTYPE {
            return Err(corrupt(format!("`{name}` is stored as {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let shape = Shape4::new(self.u32()?, self.u32()?, self.u32()?, self.u32()?);
        let size = dtype.size();
        let raw = self.take(shape.numel().checked_mul(size).ok_or_else(|| corrupt("tensor too large"))?)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Ok((name, Tensor4::from_vec(shape, data)?))
    }
}

/// Parses a checkpoint, rebuilding the model from its embedded config.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("missing checkpoint signature"));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    r.bytes = body;

    let config = NetworkConfig::from_kv(&KvFile::parse(r.text()?)?)?;
    let state = KvFile::parse(r.text()?)?;
    let count = r.u32()?;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = r.tensor::<T>()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after tensors"));
    }

    let mut take = |name: &str, want: Shape4| -> Result<Tensor4<T>> {
        let t = tensors.remove(name).ok_or_else(|| corrupt(format!("missing tensor `{name}`")))?;
        if t.shape() != want {
            return Err(corrupt(format!("`{name}` has shape {}, config implies {want}", t.shape())));
        }
        Ok(t)
    };

    let mut model = build_network::<T>(&config)?;
    let shapes: Vec<(String, Shape4)> = model.params().iter().map(|p| (p.name.clone(), p.value.shape())).collect();
    for (p, (name, shape)) in model.params_mut().iter_mut().zip(&shapes) {
        p.value = take(name, *shape)?;
    }
    let flags: Vec<u8> = parse_list("stats_initialized", state.get("stats_initialized").unwrap_or(""))?;
    if flags.len() != model.running_stats().len() {
        return Err(corrupt("batchnorm flag count does not match the network"));
    }
    for ((name, stats), flag) in model.running_stats_mut().iter_mut().zip(flags) {
        let shape = stats.mean.shape();
        let mean = take(&format!("{name}.running_mean"), shape)?;
        let var = take(&format!("{name}.running_var"), shape)?;
        stats.set(mean, var)?;
        if flag == 0 {
            *stats = crate::ops::RunningStats::new(stats.channels(), stats.momentum, stats.epsilon);
        }
    }

    let optimizer = match state.get("optimizer") {
        None => None,
        Some(_) => {
            let cfg = OptimizerConfig::read_kv(&state)?;
            let mut opt = Optimizer::new(cfg, model.params())?;
            opt.steps = state.require("optimizer_steps")?;
            for (i, (name, shape)) in shapes.iter().enumerate() {
                opt.first[i] = take(&format!("optim.first.{name}"), *shape)?;
                if !opt.second.is_empty() {
                    opt.second[i] = take(&format!("optim.second.{name}"), *shape)?;
                }
            }
            Some(opt)
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint {
        model,
        step: state.require("step")?,
        optimizer,
    })
}

pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    step: u64,
    optimizer: Option<&Optimizer<T>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    // write then rename so an interrupted save never leaves a partial file
    let tmp = path.with_extension("partial");
    fs::write(&tmp, encode_checkpoint(model, step, optimizer)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::CorruptCheckpoint(m) => Error::CorruptCheckpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
