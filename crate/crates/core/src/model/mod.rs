//! Completion models: the coupled network and a single U-Net baseline.

pub mod cunet;
pub mod unet;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use cunet::{
    fuse, total_loss, CompletionOutput, CuNet, CuNetConfig, CuNetVars, GlobalInput, LossWeights, Variant,
};
pub use unet::{UNet, UNetSpec};

use crate::error::{Error, Result};
use crate::grid::{DepthMap, SparseDepthMap};
use crate::nn::checkpoint::{self, NamedTensor};
use crate::nn::{AdamConfig, Gradients, ParamStore, Tape, Tensor};
use cunet::{batch_tensor, depth_head, grid_from_plane};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Arch {
    #[default]
    CuNet,
    /// One U-Net sized to roughly the coupled network's parameter count.
    Single,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::CuNet => "cunet",
            Arch::Single => "single",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cunet" => Ok(Arch::CuNet),
            "single" => Ok(Arch::Single),
            other => Err(Error::Config(format!("unknown model.arch `{other}` (expected cunet or single)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub cunet: CuNetConfig,
}

/// Baseline widths within this relative distance of the coupled network's size are accepted.
pub const PARITY_TOLERANCE: f64 = 0.10;

/// Level widths for a single U-Net whose parameter count is closest to
/// `target`, found by scaling `base` uniformly.
pub fn parity_channels(base: &[usize], target: usize) -> Result<Vec<usize>> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for step in 0..=400 {
        let k = 1.0 + step as f64 * 0.005;
        let widths: Vec<usize> = base.iter().map(|&w| ((w as f64 * k).round() as usize).max(1)).collect();
        let spec = UNetSpec {
            input_channels: 1,
            level_channels: widths.clone(),
            guidance: false,
        };
        let gap = (spec.param_count() as f64 / target as f64 - 1.0).abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, widths));
        }
    }
    match best {
        Some((gap, widths)) if gap <= PARITY_TOLERANCE => Ok(widths),
        _ => Err(Error::Config(format!(
            "no single U-Net width within {PARITY_TOLERANCE} of {target} parameters"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleUNet {
    pub net: UNet,
    pub depth_scale: f32,
    pub normalize_loss: bool,
}

impl SingleUNet {
    /// A baseline matched in size to the coupled network described by `cfg`.
    pub fn parity(cfg: &CuNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let target = cfg.local_spec().param_count() + cfg.global_spec().param_count();
        let spec = UNetSpec {
            input_channels: 1,
            level_channels: parity_channels(&cfg.level_channels, target)?,
            guidance: false,
        };
        Ok(Self {
            net: UNet::new(spec, 0, rng)?,
            depth_scale: cfg.depth_scale,
            normalize_loss: cfg.normalize_loss,
        })
    }

    fn depth<T: crate::nn::Scalar>(&self, tape: &mut Tape<T>, sparse: &Tensor<T>) -> Result<crate::nn::Var> {
        let params = self.net.store.bind(tape);
        let inv = T::one() / T::lit(self.depth_scale as f64);
        let x = tape.constant(Tensor::from_fn(sparse.shape(), |i| sparse.data()[i] * inv));
        let out = self.net.forward(tape, &params, x)?;
        Ok(depth_head(tape, out.depth, self.depth_scale))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    CuNet(CuNet),
    Single(SingleUNet),
}

/// One image's prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub depth: DepthMap,
    /// Intermediate maps of the coupled network.
    pub detail: Option<CompletionOutput>,
}

impl Model {
    /// Fresh weights drawn from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match cfg.arch {
            Arch::CuNet => Model::CuNet(CuNet::new(cfg.cunet.clone(), &mut rng)?),
            Arch::Single => Model::Single(SingleUNet::parity(&cfg.cunet, &mut rng)?),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            Model::CuNet(_) => Arch::CuNet,
            Model::Single(_) => Arch::Single,
        }
    }

    fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        match self {
            Model::CuNet(m) => vec![("local", &m.local.store), ("global", &m.global.store)],
            Model::Single(m) => vec![("single", &m.net.store)],
        }
    }

    pub fn param_count(&self) -> usize {
        self.stores().iter().map(|(_, s)| s.numel()).sum()
    }

    /// Height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        match self {
            Model::CuNet(m) => m.local.spec.divisor(),
            Model::Single(m) => m.net.spec.divisor(),
        }
    }

    pub fn loss_and_grads(
        &self,
        sparse: &Tensor<f32>,
        gt: &Tensor<f32>,
        mask: &Tensor<f32>,
    ) -> Result<(f64, Gradients<f32>)> {
        match self {
            Model::CuNet(m) => m.loss_and_grads(sparse, gt, mask),
            Model::Single(m) => {
                let mut tape = Tape::<f32>::new();
                let d = m.depth(&mut tape, sparse)?;
                let loss = tape.masked_mse(d, gt.clone(), mask.clone(), m.normalize_loss)?;
                let value = tape.value(loss).item() as f64;
                Ok((value, tape.backward(loss)?))
            }
        }
    }

    pub fn adam_step(&mut self, grads: &Gradients<f32>, cfg: &AdamConfig) -> Result<()> {
        match self {
            Model::CuNet(m) => {
                m.local.store.adam_step(grads, cfg)?;
                m.global.store.adam_step(grads, cfg)
            }
            Model::Single(m) => m.net.store.adam_step(grads, cfg),
        }
    }

    pub fn predict_batch(&self, sparse: &[&SparseDepthMap]) -> Result<Vec<Prediction>> {
        match self {
            Model::CuNet(m) => Ok(m
                .predict_batch(sparse)?
                .into_iter()
                .map(|o| Prediction {
                    depth: o.d_fused.clone(),
                    detail: Some(o),
                })
                .collect()),
            Model::Single(m) => {
                let input = batch_tensor::<f32>(sparse)?;
                let mut tape = Tape::<f32>::new();
                let d = m.depth(&mut tape, &input)?;
                Ok((0..sparse.len())
                    .map(|b| Prediction {
                        depth: grid_from_plane(tape.value(d), b),
                        detail: None,
                    })
                    .collect())
            }
        }
    }

    pub fn predict(&self, sparse: &SparseDepthMap) -> Result<Prediction> {
        Ok(self.predict_batch(&[sparse])?.remove(0))
    }

    /// Parameters as `<store>.<layer>.<w|b>` tensors, in a fixed order.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.stores()
            .into_iter()
            .flat_map(|(prefix, store)| {
                store.iter().map(move |p| NamedTensor {
                    name: format!("{prefix}.{}", p.name),
                    tensor: p.value.clone(),
                })
            })
            .collect()
    }

    /// Replaces every parameter value; names and shapes must match exactly.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let stores: Vec<(&str, &mut ParamStore)> = match self {
            Model::CuNet(m) => vec![("local", &mut m.local.store), ("global", &mut m.global.store)],
            Model::Single(m) => vec![("single", &mut m.net.store)],
        };
        let expected: usize = stores.iter().map(|(_, s)| s.len()).sum();
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {expected}",
                tensors.len()
            )));
        }
        let mut it = tensors.iter();
        for (prefix, store) in stores {
            for p in store.iter_mut() {
                let t = it.next().unwrap();
                let name = format!("{prefix}.{}", p.name);
                if t.name != name || t.tensor.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "expected {name} {:?}, found {} {:?}",
                        p.value.shape(),
                        t.name,
                        t.tensor.shape()
                    )));
                }
                p.value = t.tensor.clone();
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.named_tensors())
    }

    /// Builds the architecture described by `cfg` and loads weights from `path`.
    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let tensors = checkpoint::load(path)?;
        let mut model = Model::new(cfg, 0)?;
        model.load_tensors(&tensors)?;
        Ok(model)
    }
}
