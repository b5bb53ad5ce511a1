//! L2 training: single steps, the checkpointing loop, and resumption.
//!
//! Output directory layout:
//!
//! ```text
//! train_config    key/value echo of the training and network configs
//! loss_log.csv    step,loss,val_psnr (val_psnr empty when not computed)
//! ckpt_<step>     checkpoints (see crate::checkpoint)
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autograd::Tape;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{join_list, parse_list, KvFile};
use crate::dataset::{Batch, BatchSource, PatchPair};
use crate::error::{Error, Result};
use crate::metrics;
use crate::network::Model;
use crate::ops::Mode;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor4;

pub const LOSS_LOG: &str = "loss_log.csv";
pub const TRAIN_CONFIG: &str = "train_config";

/// Keys read by [`TrainConfig::read_kv`], optimizer keys included.
pub const TRAIN_KEYS: &[&str] = &[
    "optimizer",
    "lr",
    "beta1",
    "beta2",
    "epsilon",
    "momentum",
    "batch_size",
    "steps",
    "checkpoint_interval",
    "validation_interval",
    "train_seed",
    "levels",
    "decay_every",
    "decay_factor",
];

/// Multiply the step size by `factor` every `every` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub every: u64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub steps: u64,
    /// 0 writes only the initial and final checkpoints.
    pub checkpoint_interval: u64,
    /// 0 disables validation.
    pub validation_interval: u64,
    pub seed: u64,
    pub levels: Vec<f64>,
    pub decay: Option<StepDecay>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            steps: 1000,
            checkpoint_interval: 500,
            validation_interval: 100,
            seed: 0,
            levels: (1..=9).map(|i| i as f64 / 10.0).collect(),
            decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.levels.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::config("levels", "every level must lie in (0, 1)"));
        }
        if let Some(d) = self.decay {
            if d.every == 0 || !(d.factor > 0.0) {
                return Err(Error::config("decay", "needs a positive interval and factor"));
            }
        }
        Ok(())
    }

    /// Step-size multiplier in effect for the update that completes `step`.
    pub fn lr_scale(&self, step: u64) -> f64 {
        match self.decay {
            Some(d) => d.factor.powi(((step.saturating_sub(1)) / d.every) as i32),
            None => 1.0,
        }
    }

    pub fn write_kv(&self, kv: &mut KvFile) {
        self.optimizer.write_kv(kv);
        kv.push("batch_size", self.batch_size);
        kv.push("steps", self.steps);
        kv.push("checkpoint_interval", self.checkpoint_interval);
        kv.push("validation_interval", self.validation_interval);
        kv.push("train_seed", self.seed);
        kv.push("levels", join_list(&self.levels));
        if let Some(d) = self.decay {
            kv.push("decay_every", d.every);
            kv.push("decay_factor", d.factor);
        }
    }

    /// Reads the keys written by [`write_kv`](Self::write_kv), defaulting
    /// absent ones. Unrelated keys are ignored.
    pub fn read_kv(kv: &KvFile) -> Result<Self> {
        let d = TrainConfig::default();
        let decay = match (kv.parse_opt::<u64>("decay_every")?, kv.parse_opt::<f64>("decay_factor")?) {
            (Some(every), Some(factor)) => Some(StepDecay { every, factor }),
            (None, None) => None,
            _ => return Err(Error::config("decay", "decay_every and decay_factor go together")),
        };
        let cfg = TrainConfig {
            optimizer: OptimizerConfig::read_kv(kv)?,
            batch_size: kv.parse_opt("batch_size")?.unwrap_or(d.batch_size),
            steps: kv.parse_opt("steps")?.unwrap_or(d.steps),
            checkpoint_interval: kv.parse_opt("checkpoint_interval")?.unwrap_or(d.checkpoint_interval),
            validation_interval: kv.parse_opt("validation_interval")?.unwrap_or(d.validation_interval),
            seed: kv.parse_opt("train_seed")?.unwrap_or(d.seed),
            levels: match kv.get("levels") {
                Some(s) => parse_list("levels", s)?,
                None => d.levels,
            },
            decay,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub val_psnr: Option<f64>,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("step,loss,val_psnr\n");
    for r in log {
        // shortest round-trip formatting so a resumed log matches exactly
        let val = r.val_psnr.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{val}\n", r.step, r.loss));
    }
    out
}

pub fn parse_loss_log(text: &str) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "step,loss,val_psnr")) => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                reason: "expected header `step,loss,val_psnr`".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |what: &str| Error::Parse {
                line: i + 1,
                reason: format!("bad {what} in `{l}`"),
            };
            let mut f = l.split(',');
            let step = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("step"))?;
            let loss = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("loss"))?;
            let val_psnr = match f.next().unwrap_or("") {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|_| bad("val_psnr"))?),
            };
            Ok(LossRecord { step, loss, val_psnr })
        })
        .collect()
}

/// Mean of the last `window` losses (all of them if fewer).
pub fn smoothed_loss(log: &[LossRecord], window: usize) -> f64 {
    let tail = &log[log.len().saturating_sub(window.max(1))..];
    tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
}

/// Model, optimizer and loss history of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: Optimizer<f32>,
    /// Number of completed updates.
    pub step: u64,
    pub log: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(model: Model<f32>, optimizer: OptimizerConfig) -> Result<Self> {
        let optimizer = Optimizer::new(optimizer, model.params())?;
        Ok(TrainState {
            model,
            optimizer,
            step: 0,
            log: Vec::new(),
        })
    }

    /// Restores the newest `ckpt_<step>` in `dir` and the loss log up to it.
    pub fn resume(dir: &Path) -> Result<Self> {
        let (step, path) = latest_checkpoint(dir)?
            .ok_or_else(|| Error::config("resume", format!("no checkpoint in {}", dir.display())))?;
        let ck = load_checkpoint::<f32>(&path)?;
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{}: no optimizer state", path.display())))?;
        let log_path = dir.join(LOSS_LOG);
        let log = match fs::read_to_string(&log_path) {
            Ok(text) => parse_loss_log(&text)?.into_iter().filter(|r| r.step <= step).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(log_path, e)),
        };
        Ok(TrainState {
            model: ck.model,
            optimizer,
            step: ck.step,
            log,
        })
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}")
}

/// Newest checkpoint in `dir` by step number.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    Ok(entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step = name.strip_prefix("ckpt_")?.parse::<u64>().ok()?;
            Some((step, e.path()))
        })
        .max_by_key(|(s, _)| *s))
}

fn max_abs_grad(model: &Model<f32>) -> f64 {
    model.params().max_abs_grad()
}

/// One update: zero grads, taped forward in train mode, MSE against the
/// clean batch, backward, optimizer step. Fails before the update if the
/// loss or any gradient is not finite. Returns the loss.
pub fn train_step(state: &mut TrainState, batch: &Batch, lr_scale: f64) -> Result<f64> {
    let step = state.step + 1;
    state.model.params_mut().zero_grad();
    let mut tape = Tape::new();
    let x = tape.input(batch.noisy.clone());
    let y = state.model.forward_tape(&mut tape, x, Mode::Train)?;
    let loss_var = tape.mse_loss(y, &batch.clean)?;
    let loss = tape.value(loss_var).data()[0] as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            loss,
            max_grad: f64::NAN,
        });
    }
    tape.backward(loss_var, state.model.params_mut())?;
    drop(tape);
    let max_grad = max_abs_grad(&state.model);
    if !max_grad.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss, max_grad });
    }
    state.optimizer.step(state.model.params_mut(), lr_scale)?;
    state.step = step;
    state.log.push(LossRecord {
        step,
        loss,
        val_psnr: None,
    });
    Ok(loss)
}

/// Mean per-patch PSNR (8-bit scale) of eval-mode outputs.
pub fn validation_psnr(model: &Model<f32>, pairs: &[PatchPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::config("validation", "empty validation set"));
    }
    let mut total = 0.0;
    for chunk in pairs.chunks(16) {
        let noisy: Vec<Tensor4<f32>> = chunk.iter().map(|p| p.noisy.clone()).collect();
        let out = model.infer(&Tensor4::stack(&noisy)?)?;
        for (i, p) in chunk.iter().enumerate() {
            let item = Tensor4::from_vec(p.clean.shape(), out.item(i).to_vec())?;
            total += metrics::psnr_normalized(&item, &p.clean)?;
        }
    }
    Ok(total / pairs.len() as f64)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs until `state.step == cfg.steps`.
///
/// With an output directory: echoes the configuration, writes `ckpt_0` for
/// a fresh run, a checkpoint every `checkpoint_interval` steps and at the
/// end, and rewrites the loss log whenever a checkpoint is written.
pub fn train_loop(
    state: &mut TrainState,
    source: &dyn BatchSource,
    validation: &[PatchPair],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut kv = state.model.config().to_kv();
        cfg.write_kv(&mut kv);
        write_file(&dir.join(TRAIN_CONFIG), kv.to_string())?;
        if state.step == 0 {
            save(state, dir)?;
        }
    }
    let started = Instant::now();
    while state.step < cfg.steps {
        let batch = source.batch(state.step, cfg.batch_size)?;
        let loss = train_step(state, &batch, cfg.lr_scale(state.step + 1))?;
        let step = state.step;
        if cfg.validation_interval > 0 && !validation.is_empty() && step % cfg.validation_interval == 0 {
            let v = validation_psnr(&state.model, validation)?;
            state.log.last_mut().expect("just pushed").val_psnr = Some(v);
            log::info!(
                "step {step}/{}: loss {loss:.6}, val psnr {v:.3} dB ({:.1}s)",
                cfg.steps,
                started.elapsed().as_secs_f64()
            );
        } else if step % 100 == 0 {
            log::debug!("step {step}/{}: loss {loss:.6}", cfg.steps);
        }
        if let Some(dir) = out_dir {
            if (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0) || step == cfg.steps {
                save(state, dir)?;
            }
        }
    }
    Ok(())
}

fn save(state: &TrainState, dir: &Path) -> Result<()> {
    save_checkpoint(
        &state.model,
        state.step,
        Some(&state.optimizer),
        dir.join(checkpoint_name(state.step)),
    )?;
    write_file(&dir.join(LOSS_LOG), loss_log_csv(&state.log))
}
