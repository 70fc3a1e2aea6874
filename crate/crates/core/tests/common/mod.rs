//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use cunet::grid::{Grid, Mask, SparseDepthMap};
use cunet::nn::gradcheck::Differentiable;
use cunet::nn::{Scalar, Tape, Tensor, Var};
use cunet::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Metric fields in report order: rmse, mae, irmse, imae, rel, d1, d2, d3.
pub type Fields = [f64; 8];

/// Direct translation of the metric definitions, two passes, no compensation.
pub fn metrics_oracle(pred: &Grid<f32>, gt: &Grid<f32>, mask: &Mask) -> (u64, Option<Fields>) {
    let pairs: Vec<(f64, f64)> = (0..gt.len())
        .filter(|&i| mask.as_slice()[i])
        .map(|i| (pred.as_slice()[i] as f64, gt.as_slice()[i] as f64))
        .collect();
    let n = pairs.len();
    if n == 0 {
        return (0, None);
    }
    let mean = |f: &dyn Fn(f64, f64) -> f64| pairs.iter().map(|&(p, g)| f(p, g)).sum::<f64>() / n as f64;
    let frac = |k: i32| pairs.iter().filter(|&&(p, g)| (p / g).max(g / p) < 1.25f64.powi(k)).count() as f64 / n as f64;
    let fields = [
        1000.0 * mean(&|p, g| (p - g).powi(2)).sqrt(),
        1000.0 * mean(&|p, g| (p - g).abs()),
        1000.0 * mean(&|p, g| (1.0 / p - 1.0 / g).powi(2)).sqrt(),
        1000.0 * mean(&|p, g| (1.0 / p - 1.0 / g).abs()),
        mean(&|p, g| (p - g).abs() / g),
        frac(1),
        frac(2),
        frac(3),
    ];
    (n as u64, Some(fields))
}

pub fn report_fields(r: &cunet::metrics::MetricsReport) -> Option<Fields> {
    r.stats.map(|s| {
        [
            s.rmse_mm,
            s.mae_mm,
            s.irmse_per_km,
            s.imae_per_km,
            s.rel,
            s.delta1,
            s.delta2,
            s.delta3,
        ]
    })
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Pixel-by-pixel window scan.
pub fn dilate_oracle(mask: &Mask, radius: usize) -> Mask {
    let (h, w) = mask.shape();
    Grid::from_fn(h, w, |r, c| {
        let mut hit = false;
        for rr in 0..h {
            for cc in 0..w {
                if mask.at(rr, cc) && rr.abs_diff(r) <= radius && cc.abs_diff(c) <= radius {
                    hit = true;
                }
            }
        }
        hit
    })
}

/// Normal, overlap and blank masks from set algebra on dilations.
pub fn partition_oracle(sparse: &SparseDepthMap, outliers: &Mask, radius: usize) -> [Mask; 3] {
    let overlap = dilate_oracle(outliers, radius);
    let measured = dilate_oracle(&sparse.map(|&d| d > 0.0), radius);
    let normal = measured.minus(&overlap).unwrap();
    let blank = measured.or(&overlap).unwrap().not();
    [normal, overlap, blank]
}

/// Points failing the keep test, recomputed from scratch.
pub fn removal_oracle(sparse: &SparseDepthMap, conf: &Grid<f32>, eps: f32, eps_mean: f64, window: usize, both: bool) -> Mask {
    let (h, w) = sparse.shape();
    let half = window as i64 / 2;
    Grid::from_fn(h, w, |r, c| {
        let d = sparse.at(r, c);
        if d <= 0.0 {
            return false;
        }
        let mut vals = Vec::new();
        for dr in -half..=half {
            for dc in -half..=half {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                    continue;
                }
                let v = sparse.at(rr as usize, cc as usize);
                if v > 0.0 {
                    vals.push(v as f64);
                }
            }
        }
        let consistent = vals.is_empty() || (d as f64 - vals.iter().sum::<f64>() / vals.len() as f64).abs() < eps_mean;
        let confident = conf.at(r, c) > eps;
        let keep = if both { confident && consistent } else { confident || consistent };
        !keep
    })
}

pub fn random_depth_map(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> SparseDepthMap {
    Grid::from_fn(h, w, |_, _| {
        if rng.gen::<f64>() < density {
            rng.gen_range(0.5f32..80.0)
        } else {
            0.0
        }
    })
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    Grid::from_fn(h, w, |_, _| rng.gen::<f64>() < p)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in `[-hi, -gap] ∪ [gap, hi]`, away from kinks at zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: [usize; 4], gap: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..hi);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Every differentiable tape op, each reduced to a scalar by a random projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Conv,
    ConvStrided,
    Relu,
    Sigmoid,
    Softplus,
    Affine,
    Upsample,
    Concat,
    Fuse,
    MaskedMse,
    MaskedMseSum,
    WeightedSum,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Conv,
        OpKind::ConvStrided,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::Affine,
        OpKind::Upsample,
        OpKind::Concat,
        OpKind::Fuse,
        OpKind::MaskedMse,
        OpKind::MaskedMseSum,
        OpKind::WeightedSum,
    ];
}

pub struct OpCase {
    pub kind: OpKind,
    pub proj: Tensor<f64>,
    pub target: Tensor<f64>,
    pub mask: Tensor<f64>,
}

impl Differentiable for OpCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, a: &[Var]) -> Result<Var> {
        let y = match self.kind {
            OpKind::Conv => tape.conv2d(a[0], a[1], a[2], 1, 1)?,
            OpKind::ConvStrided => tape.conv2d(a[0], a[1], a[2], 2, 1)?,
            OpKind::Relu => tape.relu(a[0]),
            OpKind::Sigmoid => tape.sigmoid(a[0]),
            OpKind::Softplus => tape.softplus(a[0]),
            OpKind::Affine => tape.affine(a[0], T::lit(-1.7), T::lit(0.3)),
            OpKind::Upsample => tape.upsample_nearest2x(a[0]),
            OpKind::Concat => tape.concat_channels(a[0], a[1])?,
            OpKind::Fuse => tape.fuse(a[0], a[1], a[2], a[3])?,
            OpKind::MaskedMse | OpKind::MaskedMseSum => {
                let normalize = self.kind == OpKind::MaskedMse;
                return tape.masked_mse(a[0], self.target.cast(), self.mask.cast(), normalize);
            }
            OpKind::WeightedSum => {
                let p = tape.dot(a[0], self.proj.cast())?;
                let q = tape.dot(a[1], self.target.cast())?;
                return tape.weighted_sum(&[(p, T::lit(0.3)), (q, T::lit(-2.0))]);
            }
        };
        tape.dot(y, self.proj.cast())
    }
}

/// A random instance of `kind` and the point at which to check it.
pub fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (OpCase, Vec<Tensor<f64>>) {
    let x = [2, 3, 6, 4];
    let unit = |rng: &mut ChaCha8Rng, s| random_tensor(rng, s, -1.0, 1.0);
    let (point, out_shape) = match kind {
        OpKind::Conv | OpKind::ConvStrided => {
            let w = unit(rng, [4, 3, 3, 3]);
            let b = unit(rng, [1, 4, 1, 1]);
            let s = if kind == OpKind::Conv { [2, 4, 6, 4] } else { [2, 4, 3, 2] };
            (vec![unit(rng, x), w, b], s)
        }
        OpKind::Relu => (vec![away_from_zero(rng, x, 0.05, 2.0)], x),
        OpKind::Sigmoid | OpKind::Softplus => (vec![random_tensor(rng, x, -6.0, 6.0)], x),
        OpKind::Affine => (vec![unit(rng, x)], x),
        OpKind::Upsample => (vec![unit(rng, x)], [2, 3, 12, 8]),
        OpKind::Concat => (vec![unit(rng, x), unit(rng, [2, 2, 6, 4])], [2, 5, 6, 4]),
        OpKind::Fuse => {
            let s = [2, 1, 6, 4];
            let point = vec![
                random_tensor(rng, s, 1.0, 50.0),
                random_tensor(rng, s, 0.05, 1.0),
                random_tensor(rng, s, 1.0, 50.0),
                random_tensor(rng, s, 0.05, 1.0),
            ];
            (point, s)
        }
        OpKind::MaskedMse | OpKind::MaskedMseSum => (vec![random_tensor(rng, [2, 1, 6, 4], 0.0, 5.0)], [2, 1, 6, 4]),
        OpKind::WeightedSum => (vec![unit(rng, x), unit(rng, x)], x),
    };
    let proj = unit(rng, out_shape);
    let (target, mask) = match kind {
        OpKind::MaskedMse | OpKind::MaskedMseSum => {
            let s = [2, 1, 6, 4];
            let t = random_tensor(rng, s, 0.0, 5.0);
            let m = Tensor::from_fn(s, |_| if rng.gen::<f64>() < 0.6 { 1.0 } else { 0.0 });
            (t, m)
        }
        OpKind::WeightedSum => (unit(rng, x), Tensor::zeros([1, 1, 1, 1])),
        _ => (Tensor::zeros([1, 1, 1, 1]), Tensor::zeros([1, 1, 1, 1])),
    };
    (OpCase { kind, proj, target, mask }, point)
}

/// Total CU-Net training loss as a function of every parameter (local first).
pub struct CuNetLoss {
    pub net: cunet::model::CuNet,
    pub sparse: Tensor<f64>,
    pub gt: Tensor<f64>,
    pub mask: Tensor<f64>,
}

impl CuNetLoss {
    /// Random biases and a smooth sparse input, so outlier removal keeps every point at any confidence.
    pub fn new(variant: cunet::model::Variant, seed: u64) -> Self {
        use cunet::model::{CuNet, CuNetConfig};
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CuNetConfig {
            level_channels: vec![2, 4],
            variant,
            ..Default::default()
        };
        let mut net = CuNet::new(cfg, &mut rng).unwrap();
        // zero biases put every ReLU of an all-zero input patch exactly on its kink
        for p in net.local.store.iter_mut().chain(net.global.store.iter_mut()) {
            if p.name.ends_with(".b") {
                for v in p.value.data_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
        }
        let shape = [1, 1, 8, 16];
        let sparse = Tensor::from_fn(shape, |i| {
            if rng.gen::<f64>() < 0.3 {
                5.0 + 0.05 * (i / 16) as f64
            } else {
                0.0
            }
        });
        let gt = random_tensor(&mut rng, shape, 15.0, 25.0);
        let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < 0.7 { 1.0 } else { 0.0 });
        Self { net, sparse, gt, mask }
    }

    pub fn point(&self) -> Vec<Tensor<f64>> {
        self.net
            .local
            .store
            .iter()
            .chain(self.net.global.store.iter())
            .map(|p| p.value.cast())
            .collect()
    }
}

impl Differentiable for CuNetLoss {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, args: &[Var]) -> Result<Var> {
        let n_local = self.net.local.store.len();
        let vars = self.net.forward(tape, &args[..n_local], &args[n_local..], &self.sparse.cast())?;
        let c = &self.net.config;
        cunet::model::cunet::total_loss(tape, &vars, &self.gt.cast(), &self.mask.cast(), c.weights, c.normalize_loss)
    }
}
