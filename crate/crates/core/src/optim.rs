//! First-order optimizers over a [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use crate::autograd::ParamStore;
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    Adam(AdamParams),
    /// Heavy-ball SGD: `v = μ v + g`, `w -= lr v`.
    Sgd { lr: f64, momentum: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam(AdamParams::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::config("optimizer", format!("unknown optimizer `{other}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl OptimizerConfig {
    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerConfig::Adam(_) => OptimizerKind::Adam,
            OptimizerConfig::Sgd { .. } => OptimizerKind::Sgd,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam(p) => p.lr,
            OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerConfig::Adam(p) => OptimizerConfig::Adam(AdamParams { lr, ..p }),
            OptimizerConfig::Sgd { momentum, .. } => OptimizerConfig::Sgd { lr, momentum },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config("lr", format!("must be finite and non-negative, got {lr}")));
        }
        match *self {
            OptimizerConfig::Adam(p) => {
                for (name, b) in [("beta1", p.beta1), ("beta2", p.beta2)] {
                    if !(0.0..1.0).contains(&b) {
                        return Err(Error::config(name, format!("must lie in [0, 1), got {b}")));
                    }
                }
                if !(p.epsilon > 0.0) {
                    return Err(Error::config("epsilon", "must be positive"));
                }
            }
            OptimizerConfig::Sgd { momentum, .. } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::config("momentum", format!("must lie in [0, 1), got {momentum}")));
                }
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvFile) {
        kv.push("optimizer", self.kind());
        match *self {
            OptimizerConfig::Adam(p) => {
                kv.push("lr", p.lr);
                kv.push("beta1", p.beta1);
                kv.push("beta2", p.beta2);
                kv.push("epsilon", p.epsilon);
            }
            OptimizerConfig::Sgd { lr, momentum } => {
                kv.push("lr", lr);
                kv.push("momentum", momentum);
            }
        }
    }

    pub fn read_kv(kv: &KvFile) -> Result<Self> {
        let kind: OptimizerKind = kv.parse_opt("optimizer")?.unwrap_or(OptimizerKind::Adam);
        let cfg = match kind {
            OptimizerKind::Adam => {
                let d = AdamParams::default();
                OptimizerConfig::Adam(AdamParams {
                    lr: kv.parse_opt("lr")?.unwrap_or(d.lr),
                    beta1: kv.parse_opt("beta1")?.unwrap_or(d.beta1),
                    beta2: kv.parse_opt("beta2")?.unwrap_or(d.beta2),
                    epsilon: kv.parse_opt("epsilon")?.unwrap_or(d.epsilon),
                })
            }
            OptimizerKind::Sgd => OptimizerConfig::Sgd {
                lr: kv.parse_opt("lr")?.unwrap_or(1e-2),
                momentum: kv.parse_opt("momentum")?.unwrap_or(0.9),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One Adam step on flat slices, computed in `f64` with bias correction.
/// `t` is the 1-based step count.
pub fn adam_update<T: Scalar>(value: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, hp: AdamParams) {
    let c1 = 1.0 - hp.beta1.powf(t as f64);
    let c2 = 1.0 - hp.beta2.powf(t as f64);
    for i in 0..value.len() {
        let g = grad[i].to_f64_lossy();
        let mi = hp.beta1 * m[i].to_f64_lossy() + (1.0 - hp.beta1) * g;
        let vi = hp.beta2 * v[i].to_f64_lossy() + (1.0 - hp.beta2) * g * g;
        m[i] = T::from_f64_lossy(mi);
        v[i] = T::from_f64_lossy(vi);
        let step = hp.lr * (mi / c1) / ((vi / c2).sqrt() + hp.epsilon);
        value[i] = T::from_f64_lossy(value[i].to_f64_lossy() - step);
    }
}

pub fn sgd_update<T: Scalar>(value: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, momentum: f64) {
    for i in 0..value.len() {
        let vel = momentum * velocity[i].to_f64_lossy() + grad[i].to_f64_lossy();
        velocity[i] = T::from_f64_lossy(vel);
        value[i] = T::from_f64_lossy(value[i].to_f64_lossy() - lr * vel);
    }
}

/// Optimizer with its per-parameter moments, in parameter-store order.
/// SGD keeps its velocity in `first`; `second` stays empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T: Scalar = f32> {
    pub config: OptimizerConfig,
    pub steps: u64,
    pub first: Vec<Tensor4<T>>,
    pub second: Vec<Tensor4<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|p| Tensor4::zeros(p.value.shape())).collect::<Vec<_>>();
        Ok(Optimizer {
            config,
            steps: 0,
            first: zeros(),
            second: match config {
                OptimizerConfig::Adam(_) => zeros(),
                OptimizerConfig::Sgd { .. } => Vec::new(),
            },
        })
    }

    /// Applies one update using the gradients stored in `params`, with the
    /// step size multiplied by `lr_scale`.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr_scale: f64) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(Error::config(
                "optimizer",
                format!("state for {} parameters, store has {}", self.first.len(), params.len()),
            ));
        }
        self.steps += 1;
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.data();
            match self.config {
                OptimizerConfig::Adam(hp) => {
                    let hp = AdamParams { lr: hp.lr * lr_scale, ..hp };
                    adam_update(
                        p.value.data_mut(),
                        grad,
                        self.first[i].data_mut(),
                        self.second[i].data_mut(),
                        self.steps,
                        hp,
                    );
                }
                OptimizerConfig::Sgd { lr, momentum } => {
                    sgd_update(p.value.data_mut(), grad, self.first[i].data_mut(), lr * lr_scale, momentum);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first step is lr · g / (|g| + eps).
        let mut w = [1.0f64, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        let hp = AdamParams { lr: 0.1, ..AdamParams::default() };
        adam_update(&mut w, &[0.5, -3.0], &mut m, &mut v, 1, hp);
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 1.9).abs() < 1e-7);
        assert!((m[0] - 0.05).abs() < 1e-15);
        assert!((v[1] - 0.009).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_keeps_value_and_decays_moments() {
        let mut w = [0.7f64];
        let (mut m, mut v) = ([0.2], [0.04]);
        adam_update(&mut w, &[0.0], &mut m, &mut v, 3, AdamParams::default());
        assert!((m[0] - 0.18).abs() < 1e-15);
        assert!((v[0] - 0.04 * 0.999).abs() < 1e-15);
        // m ≠ 0 still moves w; the permutation property holds per element
        let mut a = [1.0f64, 2.0, 3.0];
        let mut b = [3.0f64, 1.0, 2.0];
        let (ga, gb) = ([0.1, -0.2, 0.3], [0.3, 0.1, -0.2]);
        let (mut ma, mut va, mut mb, mut vb) = ([0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3]);
        adam_update(&mut a, &ga, &mut ma, &mut va, 1, AdamParams::default());
        adam_update(&mut b, &gb, &mut mb, &mut vb, 1, AdamParams::default());
        assert_eq!([a[2], a[0], a[1]], b);
    }

    #[test]
    fn adam_minimizes_scalar_quadratic() {
        let mut w = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let hp = AdamParams { lr: 0.1, ..AdamParams::default() };
        for t in 1..=500 {
            let g = [2.0 * w[0]];
            adam_update(&mut w, &g, &mut m, &mut v, t, hp);
        }
        assert!(w[0].abs() < 1e-3, "{}", w[0]);
    }

    #[test]
    fn sgd_on_quadratic() {
        let mut w = [1.0f64];
        let mut vel = [0.0];
        for _ in 0..200 {
            let g = [2.0 * w[0]];
            sgd_update(&mut w, &g, &mut vel, 0.05, 0.5);
        }
        assert!(w[0].abs() < 1e-6);
    }

    #[test]
    fn zero_step_size_is_a_no_op() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor4::full(Shape4::new(1, 1, 2, 2), 0.3)).unwrap();
        store.iter_mut().for_each(|p| p.grad.fill(5.0));
        for cfg in [
            OptimizerConfig::Adam(AdamParams { lr: 0.0, ..AdamParams::default() }),
            OptimizerConfig::Sgd { lr: 0.0, momentum: 0.9 },
        ] {
            let before = store.iter().next().unwrap().value.clone();
            let mut opt = Optimizer::new(cfg, &store).unwrap();
            opt.step(&mut store, 1.0).unwrap();
            assert_eq!(store.iter().next().unwrap().value, before);
        }
    }

    #[test]
    fn config_kv_round_trip() {
        for cfg in [
            OptimizerConfig::default(),
            OptimizerConfig::Sgd { lr: 0.05, momentum: 0.5 },
        ] {
            let mut kv = KvFile::new();
            cfg.write_kv(&mut kv);
            assert_eq!(OptimizerConfig::read_kv(&kv).unwrap(), cfg);
        }
        assert!(OptimizerConfig::Adam(AdamParams { lr: -1.0, ..AdamParams::default() })
            .validate()
            .is_err());
    }
}
