//! Coupled local/global U-Nets with confidence fusion.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::unet::{UNet, UNetSpec};
use crate::error::{Error, Result};
use crate::grid::{ConfidenceMap, DepthMap, Grid, SparseDepthMap};
use crate::nn::{Gradients, Scalar, Tape, Tensor, Var};
use crate::outlier::{remove_outliers, RemovalConfig, RemovalResult};

/// A channel the global network can consume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalInput {
    /// The raw sparse map.
    Sparse,
    /// The sparse map after outlier removal.
    Cleaned,
    /// The local network's depth prediction.
    LocalDepth,
    /// A learned 1-channel reduction of the local network's last decoder features.
    LocalGuidance,
}

impl GlobalInput {
    pub fn name(self) -> &'static str {
        match self {
            GlobalInput::Sparse => "SD",
            GlobalInput::Cleaned => "SCD",
            GlobalInput::LocalDepth => "LU-Depth",
            GlobalInput::LocalGuidance => "LU-Guidance",
        }
    }
}

/// Input selection of the global network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    M1,
    M2,
    M3,
    M4,
    #[default]
    M5,
    M6,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::M1, Variant::M2, Variant::M3, Variant::M4, Variant::M5, Variant::M6];

    pub fn inputs(self) -> &'static [GlobalInput] {
        use GlobalInput::*;
        match self {
            Variant::M1 => &[Sparse],
            Variant::M2 => &[LocalDepth],
            Variant::M3 => &[LocalGuidance],
            Variant::M4 => &[Sparse, LocalDepth],
            Variant::M5 => &[Cleaned, LocalDepth],
            Variant::M6 => &[Cleaned, LocalGuidance],
        }
    }

    pub fn name(self) -> &'static str {
        ["M1", "M2", "M3", "M4", "M5", "M6"][self as usize]
    }

    pub fn uses(self, input: GlobalInput) -> bool {
        self.inputs().contains(&input)
    }

    /// Whether outlier removal has a consumer in this variant.
    pub fn needs_removal(self) -> bool {
        self.uses(GlobalInput::Cleaned)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected M1..M6)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub local: f64,
    pub global: f64,
    pub fused: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            local: 0.3,
            global: 0.3,
            fused: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CuNetConfig {
    pub level_channels: Vec<usize>,
    pub variant: Variant,
    pub weights: LossWeights,
    /// Network inputs are depths divided by this; depth heads multiply by it.
    pub depth_scale: f32,
    /// Blocks the fused loss from reaching the two depth heads.
    pub stop_gradient: bool,
    /// Divides each masked loss by its supervised pixel count.
    pub normalize_loss: bool,
    pub removal: RemovalConfig,
}

impl Default for CuNetConfig {
    fn default() -> Self {
        Self {
            level_channels: vec![16, 32, 64, 128],
            variant: Variant::M5,
            weights: LossWeights::default(),
            depth_scale: 10.0,
            stop_gradient: false,
            normalize_loss: true,
            removal: RemovalConfig::default(),
        }
    }
}

/// Minimum predicted depth in meters.
pub const DEPTH_FLOOR: f64 = 0.01;

impl CuNetConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        if [w.local, w.global, w.fused].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.depth_scale.is_finite() && self.depth_scale > 0.0) {
            return Err(Error::Config("depth scale must be positive".into()));
        }
        self.removal.validate()?;
        self.local_spec().validate()
    }

    pub fn local_spec(&self) -> UNetSpec {
        UNetSpec {
            input_channels: 1,
            level_channels: self.level_channels.clone(),
            guidance: self.variant.uses(GlobalInput::LocalGuidance),
        }
    }

    pub fn global_spec(&self) -> UNetSpec {
        UNetSpec {
            input_channels: self.variant.inputs().len(),
            level_channels: self.level_channels.clone(),
            guidance: false,
        }
    }
}

/// Tape handles of one coupled forward pass, depths in meters.
#[derive(Clone, Debug)]
pub struct CuNetVars {
    pub d_lu: Var,
    pub c_lu: Var,
    pub d_gu: Var,
    pub c_gu: Var,
    pub d_fused: Var,
    pub guidance: Option<Var>,
    /// Per-image removal results, when the variant consumes the cleaned map.
    pub removal: Option<Vec<RemovalResult>>,
}

/// Maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletionOutput {
    pub d_lu: DepthMap,
    pub c_lu: ConfidenceMap,
    pub d_gu: DepthMap,
    pub c_gu: ConfidenceMap,
    pub d_fused: DepthMap,
    pub removal: Option<RemovalResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CuNet {
    pub config: CuNetConfig,
    pub local: UNet,
    pub global: UNet,
}

pub const LOCAL_GROUP: u32 = 0;
pub const GLOBAL_GROUP: u32 = 1;

/// Stacks same-shaped maps into an `[N, 1, H, W]` tensor.
pub fn batch_tensor<T: Scalar>(maps: &[&Grid<f32>]) -> Result<Tensor<T>> {
    let Some(first) = maps.first() else {
        return Err(Error::Dataset("empty batch".into()));
    };
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        first.check_same_shape(m)?;
        data.extend(m.as_slice().iter().map(|&v| T::from_f32(v).unwrap()));
    }
    Tensor::from_vec([maps.len(), 1, h, w], data)
}

/// Plane `b` of an `[N, 1, H, W]` tensor as an f32 grid.
pub fn grid_from_plane<T: Scalar>(t: &Tensor<T>, b: usize) -> Grid<f32> {
    let [_, _, h, w] = t.shape();
    Grid::from_vec(h, w, t.plane(b, 0).iter().map(|v| v.to_f32().unwrap()).collect()).expect("plane size")
}

fn scaled<T: Scalar>(t: &Tensor<T>, factor: T) -> Tensor<T> {
    Tensor::from_fn(t.shape(), |i| t.data()[i] * factor)
}

/// Positive depth head: `scale * softplus(raw) + DEPTH_FLOOR`.
pub fn depth_head<T: Scalar>(tape: &mut Tape<T>, raw: Var, scale: f32) -> Var {
    let sp = tape.softplus(raw);
    tape.affine(sp, T::lit(scale as f64), T::lit(DEPTH_FLOOR))
}

/// Sum of `lambda * masked_mse` over the three predictions.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &CuNetVars,
    gt: &Tensor<T>,
    mask: &Tensor<T>,
    weights: LossWeights,
    normalize: bool,
) -> Result<Var> {
    let l_lu = tape.masked_mse(vars.d_lu, gt.clone(), mask.clone(), normalize)?;
    let l_gu = tape.masked_mse(vars.d_gu, gt.clone(), mask.clone(), normalize)?;
    let l_f = tape.masked_mse(vars.d_fused, gt.clone(), mask.clone(), normalize)?;
    tape.weighted_sum(&[
        (l_lu, T::lit(weights.local)),
        (l_gu, T::lit(weights.global)),
        (l_f, T::lit(weights.fused)),
    ])
}

/// Confidence-weighted fusion of two depth maps; falls back to the mean where
/// the confidences sum below `FUSE_EPS`.
pub fn fuse(d_lu: &DepthMap, c_lu: &ConfidenceMap, d_gu: &DepthMap, c_gu: &ConfidenceMap) -> Result<DepthMap> {
    d_lu.check_same_shape(c_lu)?;
    d_lu.check_same_shape(d_gu)?;
    d_lu.check_same_shape(c_gu)?;
    for c in [c_lu, c_gu] {
        if let Some(i) = c.as_slice().iter().position(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::InvalidConfidence {
                row: i / c.width(),
                col: i % c.width(),
                value: c.as_slice()[i],
            });
        }
    }
    let mut tape = Tape::<f64>::new();
    let maps = [d_lu, c_lu, d_gu, c_gu].map(|m| {
        let t = batch_tensor::<f64>(&[m]).expect("same shape");
        tape.constant(t)
    });
    let f = tape.fuse(maps[0], maps[1], maps[2], maps[3])?;
    Ok(grid_from_plane(tape.value(f), 0))
}

impl CuNet {
    pub fn new(config: CuNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let local = UNet::new(config.local_spec(), LOCAL_GROUP, rng)?;
        let global = UNet::new(config.global_spec(), GLOBAL_GROUP, rng)?;
        Ok(Self { config, local, global })
    }

    pub fn param_count(&self) -> usize {
        self.local.param_count() + self.global.param_count()
    }

    /// Coupled forward pass on an `[N, 1, H, W]` batch of sparse depths (meters).
    ///
    /// Outlier removal runs on the detached local confidence of this pass.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        local_params: &[Var],
        global_params: &[Var],
        sparse: &Tensor<T>,
    ) -> Result<CuNetVars> {
        let cfg = &self.config;
        let inv = T::one() / T::lit(cfg.depth_scale as f64);
        let x = tape.constant(scaled(sparse, inv));
        let lo = self.local.forward(tape, local_params, x)?;
        let d_lu = depth_head(tape, lo.depth, cfg.depth_scale);
        let c_lu = tape.sigmoid(lo.confidence);

        let removal = if cfg.variant.needs_removal() {
            let conf = tape.value(c_lu);
            let results = (0..sparse.shape()[0])
                .map(|b| remove_outliers(&grid_from_plane(sparse, b), &grid_from_plane(conf, b), &cfg.removal))
                .collect::<Result<Vec<_>>>()?;
            Some(results)
        } else {
            None
        };

        let mut channels = Vec::new();
        for &input in cfg.variant.inputs() {
            let v = match input {
                GlobalInput::Sparse => x,
                GlobalInput::Cleaned => {
                    let maps: Vec<&Grid<f32>> = removal.as_ref().unwrap().iter().map(|r| &r.cleaned).collect();
                    let t: Tensor<T> = batch_tensor(&maps)?;
                    tape.constant(scaled(&t, inv))
                }
                GlobalInput::LocalDepth => tape.affine(d_lu, inv, T::zero()),
                GlobalInput::LocalGuidance => lo.guidance.ok_or_else(|| Error::VariantInputMissing {
                    variant: cfg.variant.name(),
                    input: input.name(),
                })?,
            };
            channels.push(v);
        }
        let mut gin = channels[0];
        for &c in &channels[1..] {
            gin = tape.concat_channels(gin, c)?;
        }
        let go = self.global.forward(tape, global_params, gin)?;
        let d_gu = depth_head(tape, go.depth, cfg.depth_scale);
        let c_gu = tape.sigmoid(go.confidence);

        let (fd_lu, fd_gu) = if cfg.stop_gradient {
            (tape.detach(d_lu), tape.detach(d_gu))
        } else {
            (d_lu, d_gu)
        };
        let d_fused = tape.fuse(fd_lu, c_lu, fd_gu, c_gu)?;
        Ok(CuNetVars {
            d_lu,
            c_lu,
            d_gu,
            c_gu,
            d_fused,
            guidance: lo.guidance,
            removal,
        })
    }

    /// Loss and f32 gradients for one batch.
    pub fn loss_and_grads(&self, sparse: &Tensor<f32>, gt: &Tensor<f32>, mask: &Tensor<f32>) -> Result<(f64, Gradients<f32>)> {
        let mut tape = Tape::<f32>::new();
        let lp = self.local.store.bind(&mut tape);
        let gp = self.global.store.bind(&mut tape);
        let vars = self.forward(&mut tape, &lp, &gp, sparse)?;
        let loss = total_loss(&mut tape, &vars, gt, mask, self.config.weights, self.config.normalize_loss)?;
        let value = tape.value(loss).item() as f64;
        Ok((value, tape.backward(loss)?))
    }

    /// Inference on a batch of same-shaped sparse maps.
    pub fn predict_batch(&self, sparse: &[&SparseDepthMap]) -> Result<Vec<CompletionOutput>> {
        let input = batch_tensor::<f32>(sparse)?;
        let mut tape = Tape::<f32>::new();
        let lp = self.local.store.bind(&mut tape);
        let gp = self.global.store.bind(&mut tape);
        let vars = self.forward(&mut tape, &lp, &gp, &input)?;
        let mut removal = vars.removal.map(|r| r.into_iter());
        Ok((0..sparse.len())
            .map(|b| CompletionOutput {
                d_lu: grid_from_plane(tape.value(vars.d_lu), b),
                c_lu: grid_from_plane(tape.value(vars.c_lu), b),
                d_gu: grid_from_plane(tape.value(vars.d_gu), b),
                c_gu: grid_from_plane(tape.value(vars.c_gu), b),
                d_fused: grid_from_plane(tape.value(vars.d_fused), b),
                removal: removal.as_mut().and_then(|r| r.next()),
            })
            .collect())
    }

    pub fn predict(&self, sparse: &SparseDepthMap) -> Result<CompletionOutput> {
        Ok(self.predict_batch(&[sparse])?.remove(0))
    }

    /// Local network only: `(d_lu, c_lu)`.
    pub fn local_forward(&self, sparse: &SparseDepthMap) -> Result<(DepthMap, ConfidenceMap)> {
        let input = batch_tensor::<f32>(&[sparse])?;
        let mut tape = Tape::<f32>::new();
        let lp = self.local.store.bind(&mut tape);
        let inv = 1.0 / self.config.depth_scale;
        let x = tape.constant(scaled(&input, inv));
        let lo = self.local.forward(&mut tape, &lp, x)?;
        let d = depth_head(&mut tape, lo.depth, self.config.depth_scale);
        let c = tape.sigmoid(lo.confidence);
        Ok((grid_from_plane(tape.value(d), 0), grid_from_plane(tape.value(c), 0)))
    }

    /// Global network on explicitly supplied inputs: `(d_gu, c_gu)`.
    ///
    /// `cleaned` is required by variants that read the cleaned map, and
    /// `guidance` by those that read the local guidance channel.
    pub fn global_forward(
        &self,
        sparse: &SparseDepthMap,
        cleaned: Option<&SparseDepthMap>,
        d_lu: &DepthMap,
        guidance: Option<&Grid<f32>>,
    ) -> Result<(DepthMap, ConfidenceMap)> {
        let cfg = &self.config;
        let inv = 1.0 / cfg.depth_scale;
        let missing = |input: GlobalInput| Error::VariantInputMissing {
            variant: cfg.variant.name(),
            input: input.name(),
        };
        let mut planes: Vec<Grid<f32>> = Vec::new();
        for &input in cfg.variant.inputs() {
            let m = match input {
                GlobalInput::Sparse => sparse.map(|v| v * inv),
                GlobalInput::Cleaned => cleaned.ok_or_else(|| missing(input))?.map(|v| v * inv),
                GlobalInput::LocalDepth => d_lu.map(|v| v * inv),
                GlobalInput::LocalGuidance => guidance.ok_or_else(|| missing(input))?.clone(),
            };
            sparse.check_same_shape(&m)?;
            planes.push(m);
        }
        let (h, w) = sparse.shape();
        let data = planes.iter().flat_map(|p| p.as_slice().iter().copied()).collect();
        let input = Tensor::from_vec([1, planes.len(), h, w], data)?;
        let mut tape = Tape::<f32>::new();
        let gp = self.global.store.bind(&mut tape);
        let x = tape.constant(input);
        let go = self.global.forward(&mut tape, &gp, x)?;
        let d = depth_head(&mut tape, go.depth, cfg.depth_scale);
        let c = tape.sigmoid(go.confidence);
        Ok((grid_from_plane(tape.value(d), 0), grid_from_plane(tape.value(c), 0)))
    }
}
