//! Training, evaluation and the experiment sweeps.

pub mod data;
pub mod eval;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use data::Dataset;
pub use eval::{
    ablation_csv, ablation_sweep, density_csv, density_sweep, evaluate, evaluate_predictions, subsampled, AblationRow,
    EvalConfig, Evaluation, SweepRow,
};

use crate::area::AreaReports;
use crate::error::{Error, Result};
use crate::model::cunet::batch_tensor;
use crate::model::Model;
use crate::nn::{AdamConfig, Tensor};
use crate::scene::Sample;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub manifest: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Crop `(height, width)` applied when the dataset is assembled.
    pub crop: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            epochs: 15,
            batch_size: 6,
            lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_every: 5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
            crop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return fail("train.batch_size must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("train.lr must be > 0");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return fail("train.lr_decay_factor must be in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return fail("train.lr_decay_every must be >= 1");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("Adam betas must be in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail("train.eps must be > 0 and train.weight_decay >= 0");
        }
        Ok(())
    }

    pub fn adam_at(&self, epoch: usize) -> AdamConfig {
        AdamConfig {
            lr: lr_at(epoch, self),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Step schedule: `lr * factor^floor(epoch / every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub validation: Option<AreaReports>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str =
    "epoch,lr,train_loss,val_count,val_rmse_mm,val_normal_rmse_mm,val_overlap_rmse_mm,val_blank_rmse_mm";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        let fmt = |v: Option<f64>| v.map(crate::metrics::sig6).unwrap_or_default();
        for r in &self.records {
            let _ = write!(s, "{},{},{}", r.epoch, crate::metrics::sig6(r.lr), crate::metrics::sig6(r.train_loss));
            match &r.validation {
                Some(v) => {
                    let _ = writeln!(
                        s,
                        ",{},{},{},{},{}",
                        v.all.valid_count,
                        fmt(v.all.rmse_mm()),
                        fmt(v.normal.rmse_mm()),
                        fmt(v.overlap.rmse_mm()),
                        fmt(v.blank.rmse_mm())
                    );
                }
                None => s.push_str(",,,,,\n"),
            }
        }
        s
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }
}

/// Batch tensors: sparse depth, ground truth and its validity mask.
pub fn batch_tensors(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let sparse: Vec<_> = samples.iter().map(|s| &s.sparse).collect();
    let gt: Vec<_> = samples.iter().map(|s| &s.gt).collect();
    let x = batch_tensor::<f32>(&sparse)?;
    let g = batch_tensor::<f32>(&gt)?;
    let m = Tensor::from_fn(g.shape(), |i| if g.data()[i] > 0.0 { 1.0 } else { 0.0 });
    Ok((x, g, m))
}

/// Where and how often training writes artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput<'a> {
    /// Receives `epoch_NNN.ckpt` after every epoch, `model.ckpt` and `train_log.csv`.
    pub dir: Option<&'a Path>,
    /// Evaluated after every epoch when present.
    pub validation: Option<(&'a Dataset, EvalConfig)>,
}

/// Name of the final checkpoint written by [`train`].
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

/// Trains `model` in place with Adam and the step schedule.
///
/// Each epoch visits the samples in an order drawn from `seed`; a run is
/// fully determined by the initial weights, the data and `seed`.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, seed: u64, out: &TrainOutput<'_>) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let (h, w) = data.samples[0].sparse.shape();
    let d = model.divisor();
    if h % d != 0 || w % d != 0 {
        return Err(Error::ShapeNotDivisible {
            height: h,
            width: w,
            divisor: d,
        });
    }
    if let Some(dir) = out.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let adam = cfg.adam_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let (x, g, m) = batch_tensors(&samples)?;
            let (loss, grads) = model.loss_and_grads(&x, &g, &m)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("loss {loss} on samples {chunk:?} at lr {}", adam.lr),
                });
            }
            model.adam_step(&grads, &adam)?;
            total += loss;
            batches += 1;
        }
        let validation = match &out.validation {
            Some((val, ecfg)) => Some(evaluate(model, val, ecfg)?.aggregate),
            None => None,
        };
        log.records.push(EpochRecord {
            epoch,
            lr: adam.lr,
            train_loss: total / batches as f64,
            validation,
        });
        if let Some(dir) = out.dir {
            model.save(&dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            let path = dir.join("train_log.csv");
            fs::write(&path, log.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
    }
    if let Some(dir) = out.dir {
        model.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(log)
}
