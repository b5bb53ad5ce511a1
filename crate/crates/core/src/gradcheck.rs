//! Central finite differences, used as the oracle for the autodiff tests,
//! and a whole-network gradient check.

use crate::autograd::{OpKind, Tape};
use crate::error::{Error, Result};
use crate::network::{build_network, Model, NetworkConfig};
use crate::ops::Mode;
use crate::rng::{derive_seed, tensor_uniform};
use crate::tensor::{Shape4, Tensor4};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i` of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor4<f64>) -> f64, x: &Tensor4<f64>, step: f64) -> Tensor4<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor4::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// `|a - b| / max(|a|, |b|, floor)`. The floor keeps gradients that are
/// numerically zero from producing meaningless ratios.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`relative_error`] over paired elements.
pub fn max_relative_error(a: &Tensor4<f64>, b: &Tensor4<f64>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}

/// Tolerances of [`check_network_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Minimum distance between each window's median and its neighbours in
    /// sorted order. Exact ties are allowed: they come from padding, inactive
    /// relus or values copied by an earlier median, and perturbations move
    /// both sides of such a tie together.
    pub median_gap: f64,
    /// Minimum `|x|` at every relu input.
    pub relu_margin: f64,
    /// Denominator floor of the relative error. Conv biases feeding a
    /// batchnorm have an exact gradient of zero, where the central difference
    /// returns pure cancellation noise (a few 1e-9); the floor keeps that
    /// noise from reading as a large relative error.
    pub floor: f64,
    pub max_attempts: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            median_gap: 1e-3,
            relu_margin: 1e-4,
            floor: 1e-3,
            max_attempts: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGradCheck {
    /// Seed of the accepted input.
    pub input_seed: u64,
    pub attempts: usize,
    pub max_rel_error: f64,
    /// Tensor holding the worst element (`input` or a parameter name).
    pub worst: String,
    pub checked: usize,
}

fn window_is_separated(plane: &[f64], h: usize, w: usize, k: usize, rank: usize, gap: f64) -> bool {
    let r = (k / 2) as isize;
    let mut win = Vec::with_capacity(k * k);
    for i in 0..h as isize {
        for j in 0..w as isize {
            win.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y, x) = (i + dy, j + dx);
                    win.push(if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        0.0
                    } else {
                        plane[y as usize * w + x as usize]
                    });
                }
            }
            let mut sorted = win.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let m = sorted[rank - 1];
            let neighbours = [rank.checked_sub(2).map(|i| sorted[i]), sorted.get(rank).copied()];
            for v in neighbours.into_iter().flatten() {
                if v != m && (v - m).abs() <= gap {
                    return false;
                }
            }
        }
    }
    true
}

/// Whether every median window and relu input of the forward pass on `x`
/// is far enough from a kink for finite differences with `opts.step`.
pub fn is_well_separated(model: &mut Model<f64>, x: &Tensor4<f64>, opts: &GradCheckOptions) -> Result<bool> {
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    model.forward_tape(&mut tape, v, Mode::Train)?;
    let k = model.config().median_kernel;
    let rank = k * k / 2 + 1;
    for rec in tape.records() {
        let input = tape.value(rec.inputs()[0]);
        match rec.kind() {
            OpKind::Median => {
                let s = input.shape();
                for n in 0..s.n {
                    for c in 0..s.c {
                        if !window_is_separated(input.plane(n, c), s.h, s.w, k, rank, opts.median_gap) {
                            return Ok(false);
                        }
                    }
                }
            }
            OpKind::Relu => {
                if input.data().iter().any(|&a| a != 0.0 && a.abs() < opts.relu_margin) {
                    return Ok(false);
                }
            }
            _ => {}
        }
    }
    Ok(true)
}

/// `sum(model(x) ⊙ weights)` in train mode.
fn probe_loss(model: &mut Model<f64>, x: &Tensor4<f64>, weights: &Tensor4<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let y = model.forward_tape(&mut tape, v, Mode::Train)?;
    let w = tape.input(weights.clone());
    let p = tape.mul(y, w)?;
    let l = tape.sum(p)?;
    Ok(tape.value(l).data()[0])
}

/// Compares reverse-mode gradients of a random linear probe of the network
/// output against central differences, for the input and every parameter,
/// in 64-bit train mode. Inputs are drawn uniformly in `[0, 1)` from seeds
/// derived from `seed` until one passes [`is_well_separated`].
pub fn check_network_gradients(
    config: &NetworkConfig,
    input: Shape4,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<NetworkGradCheck> {
    let mut model = build_network::<f64>(config)?;
    let out_shape = input.with_channels(config.channels);
    let weights = tensor_uniform::<f64>(out_shape, derive_seed(seed, &[u64::MAX]), -1.0, 1.0);
    let mut accepted = None;
    for attempt in 0..opts.max_attempts {
        let s = derive_seed(seed, &[attempt as u64]);
        let x = tensor_uniform::<f64>(input, s, 0.0, 1.0);
        if is_well_separated(&mut model, &x, opts)? {
            accepted = Some((attempt, s, x));
            break;
        }
    }
    let (attempt, input_seed, x) = accepted.ok_or_else(|| {
        Error::config(
            "grad-check",
            format!("no well-separated input found in {} attempts", opts.max_attempts),
        )
    })?;

    model.params_mut().zero_grad();
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = model.forward_tape(&mut tape, xv, Mode::Train)?;
    let wv = tape.input(weights.clone());
    let p = tape.mul(y, wv)?;
    let l = tape.sum(p)?;
    let grads = tape.backward(l, model.params_mut())?;
    let gx = grads.get(xv).cloned().unwrap_or_else(|| Tensor4::zeros(x.shape()));
    drop(tape);

    let mut worst = ("input".to_string(), 0.0);
    let mut checked = 0;
    let fd = finite_diff_grad(|t| probe_loss(&mut model, t, &weights).expect("forward succeeded once"), &x, opts.step);
    let err = max_relative_error(&gx, &fd, opts.floor);
    checked += x.len();
    if err > worst.1 {
        worst = ("input".to_string(), err);
    }

    let ids: Vec<_> = model.params().iter().map(|p| p.id()).collect();
    for id in ids {
        let analytic = model.params().get(id).grad.clone();
        let mut numeric = Tensor4::zeros(analytic.shape());
        for i in 0..analytic.len() {
            let orig = model.params().get(id).value.data()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                model.params_mut().get_mut(id).value.data_mut()[i] = v;
                probe_loss(&mut model, &x, &weights)
            };
            let up = eval_at(orig + opts.step)?;
            let down = eval_at(orig - opts.step)?;
            eval_at(orig)?;
            numeric.data_mut()[i] = (up - down) / (2.0 * opts.step);
        }
        let err = max_relative_error(&analytic, &numeric, opts.floor);
        checked += analytic.len();
        if err > worst.1 {
            worst = (model.params().get(id).name.clone(), err);
        }
    }
    Ok(NetworkGradCheck {
        input_seed,
        attempts: attempt + 1,
        max_rel_error: worst.1,
        worst: worst.0,
        checked,
    })
}
