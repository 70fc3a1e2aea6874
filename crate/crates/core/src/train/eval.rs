//! Pixel-pooled evaluation and the density / ablation sweeps.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::{train, Dataset, TrainConfig, TrainLog, TrainOutput};
use crate::area::{partition, AreaAccumulator, AreaReports, DEFAULT_RADIUS};
use crate::depth_io::subsample;
use crate::error::{Error, Result};
use crate::grid::DepthMap;
use crate::metrics::CSV_HEADER;
use crate::model::{Model, ModelConfig, Variant};
use crate::scene::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    /// Dilation radius of the area partition.
    pub radius: usize,
    pub batch_size: usize,
    /// Worker threads; 0 evaluates on the calling thread.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            radius: DEFAULT_RADIUS,
            batch_size: 8,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_sample: Vec<AreaReports>,
    /// Pooled over every evaluated pixel of the dataset.
    pub aggregate: AreaReports,
}

fn sample_accumulator(pred: &DepthMap, sample: &Sample, radius: usize) -> Result<AreaAccumulator> {
    let part = partition(&sample.sparse, &sample.outliers, radius)?;
    let mut acc = AreaAccumulator::new();
    acc.add(pred, &sample.gt, &sample.gt.valid_mask(), &part)?;
    Ok(acc)
}

/// Reduces per-sample accumulators in index order, so the result does not
/// depend on how the samples were scheduled.
fn pool(accs: Vec<AreaAccumulator>) -> Evaluation {
    let mut total = AreaAccumulator::new();
    let per_sample = accs
        .iter()
        .map(|a| {
            total.merge(a);
            a.report()
        })
        .collect();
    Evaluation {
        per_sample,
        aggregate: total.report(),
    }
}

fn run_batches<F>(n: usize, cfg: &EvalConfig, f: F) -> Result<Vec<AreaAccumulator>>
where
    F: Fn(std::ops::Range<usize>) -> Result<Vec<AreaAccumulator>> + Sync,
{
    let bs = cfg.batch_size.max(1);
    let ranges: Vec<_> = (0..n).step_by(bs).map(|s| s..(s + bs).min(n)).collect();
    let chunks: Vec<Vec<AreaAccumulator>> = if cfg.threads == 0 {
        ranges.into_iter().map(&f).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", cfg.threads)))?;
        pool.install(|| ranges.into_par_iter().map(&f).collect::<Result<_>>())?
    };
    Ok(chunks.into_iter().flatten().collect())
}

/// Runs `model` on every sample and pools the per-area metrics.
pub fn evaluate(model: &Model, data: &Dataset, cfg: &EvalConfig) -> Result<Evaluation> {
    evaluate_samples(model, &data.samples, cfg)
}

fn evaluate_samples(model: &Model, samples: &[Sample], cfg: &EvalConfig) -> Result<Evaluation> {
    let accs = run_batches(samples.len(), cfg, |range| {
        let batch = &samples[range];
        let sparse: Vec<_> = batch.iter().map(|s| &s.sparse).collect();
        let preds = model.predict_batch(&sparse)?;
        preds
            .iter()
            .zip(batch)
            .map(|(p, s)| sample_accumulator(&p.depth, s, cfg.radius))
            .collect()
    })?;
    Ok(pool(accs))
}

/// Scores precomputed predictions, one per sample in dataset order.
pub fn evaluate_predictions(preds: &[DepthMap], data: &Dataset, radius: usize) -> Result<Evaluation> {
    if preds.len() != data.len() {
        return Err(Error::Dataset(format!(
            "{} predictions for {} samples",
            preds.len(),
            data.len()
        )));
    }
    let accs = preds
        .iter()
        .zip(&data.samples)
        .map(|(p, s)| sample_accumulator(p, s, radius))
        .collect::<Result<Vec<_>>>()?;
    Ok(pool(accs))
}

/// Copy of `data` with every sparse map subsampled to `ratio`; outlier labels
/// follow the surviving points.
pub fn subsampled(data: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    let mut out = Dataset::default();
    for (i, (name, s)) in data.names.iter().zip(&data.samples).enumerate() {
        let sparse = subsample(&s.sparse, ratio, seed.wrapping_add(i as u64))?;
        let outliers = s.outliers.and(&sparse.valid_mask())?;
        out.push(
            name.clone(),
            Sample {
                sparse,
                gt: s.gt.clone(),
                outliers,
            },
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub reports: AreaReports,
}

/// Evaluates `model` on density-reduced copies of `data` without retraining.
pub fn density_sweep(model: &Model, data: &Dataset, ratios: &[f64], seed: u64, cfg: &EvalConfig) -> Result<Vec<SweepRow>> {
    for &r in ratios {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidRatio(r));
        }
    }
    ratios
        .iter()
        .map(|&ratio| {
            let reduced = subsampled(data, ratio, seed)?;
            Ok(SweepRow {
                ratio,
                reports: evaluate(model, &reduced, cfg)?.aggregate,
            })
        })
        .collect()
}

pub fn density_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("ratio,{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{}", r.ratio, r.reports.all.csv_row("density", "all"));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub param_count: usize,
    pub log: TrainLog,
    pub reports: AreaReports,
}

/// Trains one coupled network per variant from the same seed and data, and
/// evaluates each on `test`.
#[allow(clippy::too_many_arguments)]
pub fn ablation_sweep(
    template: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    variants: &[Variant],
    train_data: &Dataset,
    test: &Dataset,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let mut cfg = template.clone();
            cfg.arch = crate::model::Arch::CuNet;
            cfg.cunet.variant = variant;
            let mut model = Model::new(&cfg, seed)?;
            let log = train(&mut model, train_data, train_cfg, seed, &TrainOutput::default())?;
            Ok(AblationRow {
                variant,
                param_count: model.param_count(),
                log,
                reports: evaluate(&model, test, eval)?.aggregate,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("variant,{CSV_HEADER}\n");
    for r in rows {
        let inputs: Vec<_> = r.variant.inputs().iter().map(|i| i.name()).collect();
        let _ = writeln!(s, "{},{}", r.variant, r.reports.all.csv_row(&inputs.join("+"), "all"));
    }
    s
}
