//! Parameters and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, ParamKey, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// A trainable tensor with its Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor<f32>) -> Self {
        let n = value.numel();
        Self {
            name: name.into(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Kaiming-normal weights, `std = gain * sqrt(2 / fan_in)`.
    pub fn kaiming(name: impl Into<String>, shape: [usize; 4], gain: f64, rng: &mut impl Rng) -> Self {
        let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let value = Tensor::from_fn(shape, |_| normal.sample(rng) as f32);
        Self::new(name, value)
    }
}

/// One Adam update of `param` with gradient `grad`.
pub fn adam_step(param: &mut Parameter, grad: &[f32], cfg: &AdamConfig) -> Result<()> {
    if grad.len() != param.value.numel() {
        return Err(Error::TensorShape {
            op: "adam_step",
            detail: format!("{} gradient values for {} parameters", grad.len(), param.value.numel()),
        });
    }
    param.step += 1;
    let t = param.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((w, &g), m), v) in param
        .value
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(param.m.iter_mut())
        .zip(param.v.iter_mut())
    {
        let g = g as f64 + cfg.weight_decay * *w as f64;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let update = cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        *w = (*w as f64 - update) as f32;
    }
    Ok(())
}

/// An ordered set of parameters addressed by `ParamKey { group, index }`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    group: u32,
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new(group: u32) -> Self {
        Self {
            group,
            params: Vec::new(),
        }
    }

    pub fn group(&self) -> u32 {
        self.group
    }

    pub fn push(&mut self, param: Parameter) -> ParamKey {
        self.params.push(param);
        ParamKey {
            group: self.group,
            index: (self.params.len() - 1) as u32,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `tape`, converted to `T`.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let key = ParamKey {
                    group: self.group,
                    index: i as u32,
                };
                tape.param(key, p.value.cast())
            })
            .collect()
    }

    /// Applies Adam to every parameter of this group that received a gradient.
    pub fn adam_step(&mut self, grads: &Gradients<f32>, cfg: &AdamConfig) -> Result<()> {
        for (key, grad) in grads.params() {
            if key.group != self.group {
                continue;
            }
            let param = &mut self.params[key.index as usize];
            match grad {
                Some(g) => adam_step(param, g.data(), cfg)?,
                None => {
                    let zeros = vec![0.0; param.value.numel()];
                    adam_step(param, &zeros, cfg)?
                }
            }
        }
        Ok(())
    }
}
