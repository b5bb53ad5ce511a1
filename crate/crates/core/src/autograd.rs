//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! A [`Tape`] owns every value produced during one forward pass and records
//! each operation in execution order. [`Tape::backward`] walks the records
//! in exact reverse order and accumulates gradients into the
//! [`ParamStore`] buffers (additively; callers zero them between steps).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::median::{median_layer_backward, median_layer_forward, ArgMedian, MedianLayerSpec};
use crate::ops::{self, BatchNormSaved, Mode, RunningStats};
use crate::tensor::{ensure_same, Scalar, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    id: ParamId,
}

impl<T> Parameter<T> {
    pub fn id(&self) -> ParamId {
        self.id
    }
}

/// Parameters keyed by unique, stable names, kept in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config("parameter", format!("duplicate name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: Tensor4::zeros(value.shape()),
            value,
            id,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn max_abs_grad(&self) -> f64 {
        self.params.iter().map(|p| p.grad.max_abs()).fold(0.0, f64::max)
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Conv2d,
    BatchNorm,
    Relu,
    Add,
    Mul,
    Scale,
    Sum,
    Median,
    MseLoss,
}

#[derive(Debug)]
enum Saved<T> {
    Nothing,
    BatchNorm(BatchNormSaved<T>),
    Median(ArgMedian),
    Factor(T),
    Target(Tensor4<T>),
}

/// One recorded operation.
#[derive(Debug)]
pub struct Record<T> {
    kind: OpKind,
    inputs: Vec<Var>,
    output: Var,
    saved: Saved<T>,
}

impl<T> Record<T> {
    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    pub fn output(&self) -> Var {
        self.output
    }
}

/// Gradients of a scalar with respect to every tape value it depends on.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor4<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    values: Vec<Tensor4<T>>,
    param_of: Vec<Option<ParamId>>,
    records: Vec<Record<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            param_of: Vec::new(),
            records: Vec::new(),
        }
    }

    fn push_value(&mut self, value: Tensor4<T>, param: Option<ParamId>) -> Var {
        self.values.push(value);
        self.param_of.push(param);
        Var(self.values.len() - 1)
    }

    fn record(&mut self, kind: OpKind, inputs: Vec<Var>, value: Tensor4<T>, saved: Saved<T>) -> Var {
        let output = self.push_value(value, None);
        self.records.push(Record {
            kind,
            inputs,
            output,
            saved,
        });
        output
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.values.len() {
            Ok(())
        } else {
            Err(Error::UnknownValue(v.0))
        }
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.values[v.0]
    }

    pub fn records(&self) -> &[Record<T>] {
        &self.records
    }

    /// A constant leaf (no gradient flows to any parameter from it).
    pub fn input(&mut self, value: Tensor4<T>) -> Var {
        self.push_value(value, None)
    }

    /// A leaf holding a copy of a parameter's current value.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push_value(store.get(id).value.clone(), Some(id))
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        for v in [x, weight, bias] {
            self.check(v)?;
        }
        let y = ops::conv2d(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.record(OpKind::Conv2d, vec![x, weight, bias], y, Saved::Nothing))
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: Mode,
        stats: &mut RunningStats<T>,
    ) -> Result<Var> {
        for v in [x, scale, shift] {
            self.check(v)?;
        }
        let (y, saved) = ops::batchnorm(self.value(x), self.value(scale), self.value(shift), mode, stats)?;
        Ok(self.record(OpKind::BatchNorm, vec![x, scale, shift], y, Saved::BatchNorm(saved)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = ops::relu(self.value(x));
        Ok(self.record(OpKind::Relu, vec![x], y, Saved::Nothing))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.record(OpKind::Add, vec![a, b], y, Saved::Nothing))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.record(OpKind::Mul, vec![a, b], y, Saved::Nothing))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).map(|v| v * factor);
        Ok(self.record(OpKind::Scale, vec![x], y, Saved::Factor(factor)))
    }

    /// Sum of all elements, as a 1×1×1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        Ok(self.record(OpKind::Sum, vec![x], Tensor4::scalar(s), Saved::Nothing))
    }

    pub fn median(&mut self, x: Var, spec: MedianLayerSpec) -> Result<Var> {
        self.check(x)?;
        let (y, arg) = median_layer_forward(self.value(x), spec);
        Ok(self.record(OpKind::Median, vec![x], y, Saved::Median(arg)))
    }

    /// Mean squared error against a constant target, as a 1×1×1×1 tensor.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor4<T>) -> Result<Var> {
        self.check(pred)?;
        let l = ops::mse_loss(self.value(pred), target)?;
        Ok(self.record(
            OpKind::MseLoss,
            vec![pred],
            Tensor4::scalar(T::from_f64_lossy(l)),
            Saved::Target(target.clone()),
        ))
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients
    /// into `store`. Values the loss does not depend on receive no gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        self.check(loss)?;
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NotScalar(loss_value.shape()));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::ones(loss_value.shape()));

        for rec in self.records.iter().rev() {
            let Some(g) = grads[rec.output.0].take() else {
                continue;
            };
            let contributions = self.backward_record(rec, &g)?;
            grads[rec.output.0] = Some(g);
            for (var, contribution) in rec.inputs.iter().zip(contributions) {
                if let Some(c) = contribution {
                    accumulate(&mut grads[var.0], c)?;
                }
            }
        }

        for (var, pid) in self.param_of.iter().enumerate() {
            if let (Some(pid), Some(g)) = (pid, &grads[var]) {
                store.get_mut(*pid).grad.add_assign(g)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_record(&self, rec: &Record<T>, g: &Tensor4<T>) -> Result<Vec<Option<Tensor4<T>>>> {
        let input = |i: usize| self.value(rec.inputs[i]);
        Ok(match (rec.kind, &rec.saved) {
            (OpKind::Conv2d, _) => {
                let (x, w, b) = (input(0), input(1), input(2));
                let mut gw = Tensor4::zeros(w.shape());
                let mut gb = Tensor4::zeros(b.shape());
                let gx = ops::conv2d_backward(g, x, w, &mut gw, &mut gb)?;
                vec![Some(gx), Some(gw), Some(gb)]
            }
            (OpKind::BatchNorm, Saved::BatchNorm(saved)) => {
                let (gx, gs, gb) = ops::batchnorm_backward(g, saved, input(1))?;
                vec![Some(gx), Some(gs), Some(gb)]
            }
            (OpKind::Relu, _) => vec![Some(ops::relu_backward(g, input(0))?)],
            (OpKind::Add, _) => vec![Some(g.clone()), Some(g.clone())],
            (OpKind::Mul, _) => vec![Some(ops::mul(g, input(1))?), Some(ops::mul(g, input(0))?)],
            (OpKind::Scale, Saved::Factor(f)) => {
                let f = *f;
                vec![Some(g.map(|v| v * f))]
            }
            (OpKind::Sum, _) => vec![Some(Tensor4::full(input(0).shape(), g.data()[0]))],
            (OpKind::Median, Saved::Median(arg)) => vec![Some(median_layer_backward(g, arg)?)],
            (OpKind::MseLoss, Saved::Target(target)) => {
                let mut d = ops::mse_loss_backward(input(0), target)?;
                let s = g.data()[0];
                d.data_mut().iter_mut().for_each(|v| *v = *v * s);
                vec![Some(d)]
            }
            (kind, _) => unreachable!("record {kind:?} saved the wrong context"),
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor4<T>>, contribution: Tensor4<T>) -> Result<()> {
    match slot {
        Some(existing) => {
            ensure_same("gradient accumulation", existing.shape(), contribution.shape())?;
            existing.add_assign(&contribution)
        }
        None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}
