//! Central finite-difference checks of tape gradients.
//!
//! The analytic gradient is taken on a tape of the scalar type under test;
//! the numeric one is always evaluated in `f64`.

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// A scalar function of tensor arguments that can be built on any tape.
pub trait Differentiable {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, args: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Error denominators never drop below `rel_floor * max|numeric|` of the argument.
    pub rel_floor: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_floor: 1e-2,
            abs_floor: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArgReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub args: Vec<ArgReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.args.iter().map(|a| a.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

fn value_f64(f: &impl Differentiable, point: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Analytic gradients of `f` at `point`, computed in `T`.
pub fn analytic_gradients<T: Scalar>(f: &impl Differentiable, point: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.input(t.cast())).collect();
    let out = f.eval(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(point)
        .map(|(&v, p)| match grads.get(v) {
            Some(g) => g.cast(),
            None => Tensor::zeros(p.shape()),
        })
        .collect())
}

/// Central differences `(f(x + h) - f(x - h)) / 2h` for every coordinate.
pub fn numeric_gradients(f: &impl Differentiable, point: &[Tensor<f64>], step: f64) -> Result<Vec<Tensor<f64>>> {
    let mut work: Vec<Tensor<f64>> = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for a in 0..point.len() {
        let mut g = Tensor::zeros(point[a].shape());
        for k in 0..point[a].numel() {
            let x = point[a].data()[k];
            work[a].data_mut()[k] = x + step;
            let plus = value_f64(f, &work)?;
            work[a].data_mut()[k] = x - step;
            let minus = value_f64(f, &work)?;
            work[a].data_mut()[k] = x;
            g.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>], cfg: &GradCheckConfig) -> GradCheckReport {
    let args = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let floor = (cfg.rel_floor * n.max_abs()).max(cfg.abs_floor);
            let mut rep = ArgReport {
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for (k, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
                let abs = (av - nv).abs();
                let rel = abs / av.abs().max(nv.abs()).max(floor);
                rep.max_abs_error = rep.max_abs_error.max(abs);
                if rel > rep.max_rel_error || rel.is_nan() {
                    rep.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                    rep.worst_index = k;
                    rep.analytic = av;
                    rep.numeric = nv;
                }
            }
            rep
        })
        .collect();
    GradCheckReport { args }
}

/// Compares `T`-precision tape gradients against `f64` central differences.
pub fn grad_check<T: Scalar>(
    f: &impl Differentiable,
    point: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients::<T>(f, point)?;
    let numeric = numeric_gradients(f, point, cfg.step)?;
    Ok(compare(&analytic, &numeric, cfg))
}
