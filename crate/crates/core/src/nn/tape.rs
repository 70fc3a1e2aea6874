//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value. `backward`
//! walks the nodes once in reverse order, so each node's gradient is
//! complete before it is propagated to its inputs.

use super::conv::{conv2d_backward, conv2d_forward};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a parameter tensor owned by a model: `group` names the
/// parameter store and `index` the tensor within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub group: u32,
    pub index: u32,
}

/// Fused-prediction denominators below this fall back to the plain mean.
pub const FUSE_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Affine { x: Var, scale: T },
    Upsample2x(Var),
    Concat(Var, Var),
    Fuse { d1: Var, c1: Var, d2: Var, c2: Var },
    MaskedMse { pred: Var, target: Tensor<T>, mask: Tensor<T>, denom: T },
    WeightedSum(Vec<(Var, T)>),
    Dot { x: Var, weights: Tensor<T> },
}

#[cfg(test)]
impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Affine { .. } => "affine",
            Op::Upsample2x(_) => "upsample2x",
            Op::Concat(..) => "concat",
            Op::Fuse { .. } => "fuse",
            Op::MaskedMse { .. } => "masked_mse",
            Op::WeightedSum(_) => "weighted_sum",
            Op::Dot { .. } => "dot",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamKey, Var)>,
    #[cfg(test)]
    pub(crate) corrupt: Option<&'static str>,
}

/// Gradients produced by [`Tape::backward`]; only leaves keep theirs.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamKey, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf, in registration order.
    pub fn params(&self) -> impl Iterator<Item = (ParamKey, Option<&Tensor<T>>)> + '_ {
        self.params.iter().map(|&(k, v)| (k, self.get(v)))
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::TensorShape { op, detail }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            #[cfg(test)]
            corrupt: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A parameter leaf; its gradient is reported under `key`.
    pub fn param(&mut self, key: ParamKey, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((key, v));
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, padding }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(x);
        let y = Tensor::from_vec(src.shape(), src.data().iter().map(|&v| f(v)).collect()).unwrap();
        let rg = self.rg(x);
        self.push(y, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let [n, c, h, w] = src.shape();
        let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
        {
            let out = y.data_mut();
            for (p, plane) in src.data().chunks_exact(h * w).enumerate() {
                let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
                for r in 0..h {
                    for cc in 0..w {
                        let v = plane[r * w + cc];
                        let o = 2 * r * 2 * w + 2 * cc;
                        dst[o] = v;
                        dst[o + 1] = v;
                        dst[o + 2 * w] = v;
                        dst[o + 2 * w + 1] = v;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(y, Op::Upsample2x(x), rg)
    }

    /// Stacks the channels of `a` then `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [na, ca, ha, wa] = ta.shape();
        let [nb, cb, hb, wb] = tb.shape();
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(shape_err("concat", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for n in 0..na {
            data.extend_from_slice(&ta.data()[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&tb.data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let y = Tensor::from_vec([na, ca + cb, ha, wa], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Concat(a, b), rg))
    }

    /// Confidence-weighted mean `(c1*d1 + c2*d2) / (c1 + c2)`, falling back to
    /// `(d1 + d2) / 2` where the confidences sum below [`FUSE_EPS`].
    pub fn fuse(&mut self, d1: Var, c1: Var, d2: Var, c2: Var) -> Result<Var> {
        let shape = self.value(d1).shape();
        for v in [c1, d2, c2] {
            if self.value(v).shape() != shape {
                return Err(shape_err("fuse", format!("{:?} vs {:?}", shape, self.value(v).shape())));
            }
        }
        let eps = T::lit(FUSE_EPS);
        let half = T::lit(0.5);
        let (vd1, vc1, vd2, vc2) = (self.value(d1), self.value(c1), self.value(d2), self.value(c2));
        let y = Tensor::from_fn(shape, |i| {
            let s = vc1.data()[i] + vc2.data()[i];
            if s < eps {
                (vd1.data()[i] + vd2.data()[i]) * half
            } else {
                (vc1.data()[i] * vd1.data()[i] + vc2.data()[i] * vd2.data()[i]) / s
            }
        });
        let rg = [d1, c1, d2, c2].iter().any(|&v| self.rg(v));
        Ok(self.push(y, Op::Fuse { d1, c1, d2, c2 }, rg))
    }

    /// Sum of squared residuals where `mask` is 1, divided by the mask count
    /// when `normalize` is set. An empty mask yields 0.
    pub fn masked_mse(&mut self, pred: Var, target: Tensor<T>, mask: Tensor<T>, normalize: bool) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != mask.shape() {
            return Err(shape_err(
                "masked_mse",
                format!("pred {:?}, target {:?}, mask {:?}", p.shape(), target.shape(), mask.shape()),
            ));
        }
        let count: T = mask.data().iter().copied().sum();
        let denom = if normalize && count > T::zero() { count } else { T::one() };
        let mut sum = T::zero();
        for ((&pv, &tv), &mv) in p.data().iter().zip(target.data()).zip(mask.data()) {
            let r = (pv - tv) * mv;
            sum += r * r;
        }
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(sum / denom), Op::MaskedMse { pred, target, mask, denom }, rg))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(shape_err("weighted_sum", format!("term has shape {:?}", t.shape())));
            }
            total += w * t.item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// `sum(x * weights)`: projects a tensor onto a fixed direction.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape() != weights.shape() {
            return Err(shape_err("dot", format!("{:?} vs {:?}", xs.shape(), weights.shape())));
        }
        let total = xs.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(total), Op::Dot { x, weights }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", "loss must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        #[cfg(test)]
        let g = &{
            let mut g = g.clone();
            if self.corrupt == Some(node.op.name()) {
                g.data_mut().iter_mut().for_each(|v| *v *= T::lit(1.1));
            }
            g
        };
        let map = |x: Var, f: &dyn Fn(usize, T) -> T| -> Tensor<T> {
            let xs = self.value(x);
            Tensor::from_fn(xs.shape(), |k| f(k, g.data()[k]))
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, padding } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    self.value(*b),
                    *stride,
                    *padding,
                    g,
                    self.rg(*x),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Relu(x) => {
                let d = map(*x, &|k, gk| if y.data()[k] > T::zero() { gk } else { T::zero() });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = map(*x, &|k, gk| {
                    let s = y.data()[k];
                    gk * s * (T::one() - s)
                });
                self.accumulate(grads, *x, d);
            }
            Op::Softplus(x) => {
                let xs = self.value(*x);
                let d = map(*x, &|k, gk| gk * sigmoid(xs.data()[k]));
                self.accumulate(grads, *x, d);
            }
            Op::Affine { x, scale } => {
                let d = map(*x, &|_, gk| gk * *scale);
                self.accumulate(grads, *x, d);
            }
            Op::Upsample2x(x) => {
                let [n, c, h, w] = self.value(*x).shape();
                let mut d = Tensor::zeros([n, c, h, w]);
                for (p, plane) in d.data_mut().chunks_exact_mut(h * w).enumerate() {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for r in 0..h {
                        for cc in 0..w {
                            let o = 2 * r * 2 * w + 2 * cc;
                            plane[r * w + cc] = src[o] + src[o + 1] + src[o + 2 * w] + src[o + 2 * w + 1];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(*a).shape();
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for chunk in g.data().chunks_exact((ca + cb) * plane) {
                    da.extend_from_slice(&chunk[..ca * plane]);
                    db.extend_from_slice(&chunk[ca * plane..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec([n, ca, h, w], da)?);
                self.accumulate(grads, *b, Tensor::from_vec([n, cb, h, w], db)?);
            }
            Op::Fuse { d1, c1, d2, c2 } => {
                let eps = T::lit(FUSE_EPS);
                let half = T::lit(0.5);
                let (vd1, vc1, vd2, vc2) = (self.value(*d1), self.value(*c1), self.value(*d2), self.value(*c2));
                let n = y.numel();
                let shape = y.shape();
                let (mut gd1, mut gc1, mut gd2, mut gc2) = (
                    vec![T::zero(); n],
                    vec![T::zero(); n],
                    vec![T::zero(); n],
                    vec![T::zero(); n],
                );
                for k in 0..n {
                    let gk = g.data()[k];
                    let s = vc1.data()[k] + vc2.data()[k];
                    if s < eps {
                        gd1[k] = gk * half;
                        gd2[k] = gk * half;
                    } else {
                        gd1[k] = gk * vc1.data()[k] / s;
                        gd2[k] = gk * vc2.data()[k] / s;
                        gc1[k] = gk * (vd1.data()[k] - y.data()[k]) / s;
                        gc2[k] = gk * (vd2.data()[k] - y.data()[k]) / s;
                    }
                }
                self.accumulate(grads, *d1, Tensor::from_vec(shape, gd1)?);
                self.accumulate(grads, *c1, Tensor::from_vec(shape, gc1)?);
                self.accumulate(grads, *d2, Tensor::from_vec(shape, gd2)?);
                self.accumulate(grads, *c2, Tensor::from_vec(shape, gc2)?);
            }
            Op::MaskedMse { pred, target, mask, denom } => {
                let p = self.value(*pred);
                let scale = g.item() * T::lit(2.0) / *denom;
                let d = Tensor::from_fn(p.shape(), |k| {
                    let m = mask.data()[k];
                    scale * (p.data()[k] - target.data()[k]) * m * m
                });
                self.accumulate(grads, *pred, d);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(g.item() * w));
                }
            }
            Op::Dot { x, weights } => {
                let gi = g.item();
                let d = Tensor::from_fn(weights.shape(), |k| gi * weights.data()[k]);
                self.accumulate(grads, *x, d);
            }
        }
        Ok(())
    }
}
