use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::{NumericsError, Tensor};

/// Adam hyperparameters plus the l2 coefficient `alpha` of `alpha * sum(theta^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Parameter {
    value: Rc<Tensor>,
    grad: Option<Tensor>,
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Named trainable tensors with per-parameter Adam state.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Parameter>,
    pub hyper: AdamConfig,
    skipped: u64,
}

impl ParameterStore {
    pub fn new(hyper: AdamConfig) -> Self {
        Self {
            entries: BTreeMap::new(),
            hyper,
            skipped: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NumericsError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NumericsError::Contract(format!("duplicate parameter {name}")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name,
            Parameter {
                value: Rc::new(value),
                grad: None,
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                step: 0,
            },
        );
        Ok(())
    }

    /// Truncated normal (cut at two standard deviations), scaled by `std`.
    pub fn insert_trunc_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<(), NumericsError> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| p.value.as_ref())
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), NumericsError> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NumericsError::MissingParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(NumericsError::Shape(format!(
                "set {name}: shape {:?} != {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = Rc::new(value);
        Ok(())
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| Rc::make_mut(&mut p.value))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn step_count(&self, name: &str) -> Option<u64> {
        self.entries.get(name).map(|p| p.step)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), p.value.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Number of parameters skipped by [`adam_step`](Self::adam_step) for lack of a gradient.
    pub fn skipped_updates(&self) -> u64 {
        self.skipped
    }

    /// `sum(theta^2)` over every parameter.
    pub fn sum_squares(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.value.data().iter())
            .map(|v| v * v)
            .sum()
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Params<'t> {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| (k.clone(), tape.leaf_shared(Rc::clone(&p.value))))
            .collect();
        Params { vars }
    }

    /// Adds the gradients of bound parameters into the store.
    pub fn accumulate(&mut self, params: &Params<'_>, grads: &Gradients) {
        for (name, var) in &params.vars {
            let (Some(p), Some(g)) = (self.entries.get_mut(name), grads.get(var)) else {
                continue;
            };
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// One bias-corrected Adam update. The l2 term enters the gradient as
    /// `2 * alpha * theta`. Gradients are cleared afterwards.
    pub fn adam_step(&mut self) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hyper;
        for p in self.entries.values_mut() {
            let Some(grad) = p.grad.take() else {
                self.skipped += 1;
                continue;
            };
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let theta = Rc::make_mut(&mut p.value);
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for (i, th) in theta.data_mut().iter_mut().enumerate() {
                let g = grad.data()[i] + 2.0 * weight_decay * *th;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *th -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Parameters bound to one tape.
pub struct Params<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Params<'t> {
    pub fn get(&self, name: &str) -> Result<&Var<'t>, NumericsError> {
        self.vars
            .get(name)
            .ok_or_else(|| NumericsError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}
