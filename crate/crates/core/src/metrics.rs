//! Depth-completion error metrics.
//!
//! Depths are meters internally. Reports convert at the boundary: RMSE/MAE
//! in millimeters, iRMSE/iMAE in 1/km. `Rel` is the mean absolute relative
//! error and `delta_i` is the fraction of pixels with
//! `max(pred/gt, gt/pred) < 1.25^i`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{DepthMap, Mask};

/// Column header of the metrics CSV schema.
pub const CSV_HEADER: &str = "tag,area,valid_count,rmse_mm,mae_mm,irmse_km,imae_km,rel,d1,d2,d3";

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.compensation);
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Metric values over a non-empty pixel set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorStats {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub irmse_per_km: f64,
    pub imae_per_km: f64,
    pub rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Metrics over a pixel set. `stats` is `None` when no pixel was evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub valid_count: u64,
    pub stats: Option<ErrorStats>,
}

impl MetricsReport {
    pub fn empty() -> Self {
        Self {
            valid_count: 0,
            stats: None,
        }
    }

    pub fn rmse_mm(&self) -> Option<f64> {
        self.stats.map(|s| s.rmse_mm)
    }

    pub fn mae_mm(&self) -> Option<f64> {
        self.stats.map(|s| s.mae_mm)
    }

    /// One CSV row in the [`CSV_HEADER`] schema; empty metrics become empty fields.
    pub fn csv_row(&self, tag: &str, area: &str) -> String {
        let mut row = format!("{tag},{area},{}", self.valid_count);
        match &self.stats {
            Some(s) => {
                for v in [
                    s.rmse_mm,
                    s.mae_mm,
                    s.irmse_per_km,
                    s.imae_per_km,
                    s.rel,
                    s.delta1,
                    s.delta2,
                    s.delta3,
                ] {
                    let _ = write!(row, ",{}", sig6(v));
                }
            }
            None => row.push_str(",,,,,,,,"),
        }
        row
    }
}

/// Formats like C's `%.6g`.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.5e}", x);
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if !(-4..6).contains(&exp) {
        let (mantissa, e) = sci.split_at(sci.find('e').unwrap());
        let mantissa = trim_zeros(mantissa);
        let e: i32 = e[1..].parse().unwrap();
        let sign = if e < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", e.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Pixel-pooled accumulator; reports from merged accumulators equal the
/// report over the union of their pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    count: u64,
    sq_err_m: CompensatedSum,
    abs_err_m: CompensatedSum,
    sq_inv_err: CompensatedSum,
    abs_inv_err: CompensatedSum,
    rel: CompensatedSum,
    within: [u64; 3],
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one pixel. Both depths must be positive.
    #[inline]
    pub fn push(&mut self, pred: f64, gt: f64) {
        let err = pred - gt;
        let inv_err = 1.0 / pred - 1.0 / gt;
        self.count += 1;
        self.sq_err_m.add(err * err);
        self.abs_err_m.add(err.abs());
        self.sq_inv_err.add(inv_err * inv_err);
        self.abs_inv_err.add(inv_err.abs());
        self.rel.add(err.abs() / gt);
        let ratio = (pred / gt).max(gt / pred);
        let mut threshold = 1.0;
        for w in self.within.iter_mut() {
            threshold *= 1.25;
            if ratio < threshold {
                *w += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.count += other.count;
        self.sq_err_m.merge(&other.sq_err_m);
        self.abs_err_m.merge(&other.abs_err_m);
        self.sq_inv_err.merge(&other.sq_inv_err);
        self.abs_inv_err.merge(&other.abs_inv_err);
        self.rel.merge(&other.rel);
        for (a, b) in self.within.iter_mut().zip(other.within) {
            *a += b;
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn report(&self) -> MetricsReport {
        if self.count == 0 {
            return MetricsReport::empty();
        }
        let n = self.count as f64;
        MetricsReport {
            valid_count: self.count,
            stats: Some(ErrorStats {
                rmse_mm: (self.sq_err_m.value() / n).sqrt() * 1e3,
                mae_mm: self.abs_err_m.value() / n * 1e3,
                irmse_per_km: (self.sq_inv_err.value() / n).sqrt() * 1e3,
                imae_per_km: self.abs_inv_err.value() / n * 1e3,
                rel: self.rel.value() / n,
                delta1: self.within[0] as f64 / n,
                delta2: self.within[1] as f64 / n,
                delta3: self.within[2] as f64 / n,
            }),
        }
    }
}

/// Accumulates masked pixels of `pred` against `gt`, checking positivity.
pub fn accumulate(pred: &DepthMap, gt: &DepthMap, mask: &Mask, acc: &mut MetricsAccumulator) -> Result<()> {
    pred.check_same_shape(gt)?;
    pred.check_same_shape(mask)?;
    let width = gt.width();
    for (i, ((&p, &g), &m)) in pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .zip(mask.as_slice())
        .enumerate()
    {
        if !m {
            continue;
        }
        for (which, value) in [("ground truth", g), ("prediction", p)] {
            if value.is_nan() || value <= 0.0 {
                return Err(Error::NonPositiveDepth {
                    which,
                    row: i / width,
                    col: i % width,
                    value,
                });
            }
        }
        acc.push(p as f64, g as f64);
    }
    Ok(())
}

/// Metrics of `pred` against `gt` over the pixels set in `mask`.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    accumulate(pred, gt, mask, &mut acc)?;
    Ok(acc.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn single(pred: f32, gt: f32) -> ErrorStats {
        let p = Grid::filled(1, 1, pred);
        let g = Grid::filled(1, 1, gt);
        compute_metrics(&p, &g, &Grid::filled(1, 1, true))
            .unwrap()
            .stats
            .unwrap()
    }

    #[test]
    fn identity_is_perfect() {
        let g = Grid::from_fn(4, 4, |r, c| 1.0 + (r * 4 + c) as f32);
        let r = compute_metrics(&g, &g, &Grid::filled(4, 4, true)).unwrap();
        let s = r.stats.unwrap();
        assert_eq!(r.valid_count, 16);
        assert_eq!((s.rmse_mm, s.mae_mm, s.rel), (0.0, 0.0, 0.0));
        assert_eq!((s.delta1, s.delta2, s.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_meters_against_one() {
        let s = single(2.0, 1.0);
        assert_eq!(s.rmse_mm, 1000.0);
        assert_eq!(s.mae_mm, 1000.0);
        assert_eq!(s.irmse_per_km, 500.0);
        assert_eq!(s.imae_per_km, 500.0);
        assert_eq!(s.rel, 1.0);
        assert_eq!((s.delta1, s.delta2, s.delta3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn asymmetric_fields_pin_definition() {
        let a = single(2.0, 1.0);
        let b = single(1.0, 2.0);
        assert_eq!(a.rmse_mm, b.rmse_mm);
        assert_eq!(a.delta1, b.delta1);
        assert_eq!(b.rel, 0.5);
        assert_ne!(a.rel, b.rel);
        // |1/p - 1/g| does not depend on which side is the reference
        assert_eq!(a.irmse_per_km, b.irmse_per_km);
    }

    #[test]
    fn strict_delta_threshold() {
        assert_eq!(single(1.25, 1.0).delta1, 0.0);
        assert_eq!(single(1.25, 1.0).delta2, 1.0);
    }

    #[test]
    fn empty_mask_gives_null_metrics() {
        let g = Grid::filled(2, 2, 1.0f32);
        let r = compute_metrics(&g, &g, &Grid::filled(2, 2, false)).unwrap();
        assert_eq!(r, MetricsReport::empty());
        assert_eq!(r.csv_row("x", "all"), "x,all,0,,,,,,,,");
    }

    #[test]
    fn non_positive_depth_names_pixel() {
        let g = Grid::filled(2, 2, 1.0f32);
        let mut p = g.clone();
        p.set(1, 0, 0.0);
        match compute_metrics(&p, &g, &Grid::filled(2, 2, true)) {
            Err(Error::NonPositiveDepth { row: 1, col: 0, which, .. }) => assert_eq!(which, "prediction"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(1000.0), "1000");
        assert_eq!(sig6(0.5), "0.5");
        assert_eq!(sig6(1234.5678), "1234.57");
        assert_eq!(sig6(0.0131), "0.0131");
        assert_eq!(sig6(1.0 / 3.0), "0.333333");
        assert_eq!(sig6(1.5e-7), "1.5e-07");
        assert_eq!(sig6(12345678.0), "1.23457e+07");
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::default();
        s.add(1e16);
        for _ in 0..10 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 10.0);
    }
}
