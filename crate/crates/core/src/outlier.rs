//! Confidence-gated outlier removal for sparse LiDAR maps.
//!
//! A measurement is screened only where the local network is not confident:
//! it survives if its confidence exceeds `conf_threshold`, or if it differs
//! from the mean of its nonzero neighbors by less than `mean_threshold`.
//! Every decision is taken against the input map, so the pass is order
//! independent.

use crate::error::{Error, Result};
use crate::grid::{ConfidenceMap, DepthMap, Mask, SparseDepthMap};
use crate::metrics::{compute_metrics, MetricsReport};

/// How the confidence test and the neighborhood-mean test are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KeepRule {
    /// Keep if either test passes.
    #[default]
    Either,
    /// Keep only if both tests pass.
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RemovalConfig {
    /// Confidence above which a point is trusted.
    pub conf_threshold: f32,
    /// Maximum |d - neighborhood mean| in meters.
    pub mean_threshold: f64,
    /// Odd side length of the square neighborhood.
    pub window: usize,
    pub rule: KeepRule,
}

impl Default for RemovalConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.7,
            mean_threshold: 1.0,
            window: 7,
            rule: KeepRule::Either,
        }
    }
}

impl RemovalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "outlier window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if self.mean_threshold.is_nan() || self.mean_threshold < 0.0 {
            return Err(Error::Config("outlier mean threshold must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RemovalResult {
    pub cleaned: SparseDepthMap,
    pub removed: Mask,
    pub keep_ratio: f64,
}

impl RemovalResult {
    pub fn kept(&self) -> usize {
        self.cleaned.valid_count()
    }

    pub fn removed_count(&self) -> usize {
        self.removed.count()
    }

    /// `kept=<n> removed=<m> keep_ratio=<r>`
    pub fn summary(&self) -> String {
        format!(
            "kept={} removed={} keep_ratio={:.6}",
            self.kept(),
            self.removed_count(),
            self.keep_ratio
        )
    }
}

/// Mean of the nonzero pixels in the `window x window` neighborhood of
/// `(row, col)`, excluding the center. The window is clipped at the border.
pub fn neighborhood_mean(sparse: &SparseDepthMap, row: usize, col: usize, window: usize) -> (f64, usize) {
    let half = window / 2;
    let r0 = row.saturating_sub(half);
    let r1 = (row + half + 1).min(sparse.height());
    let c0 = col.saturating_sub(half);
    let c1 = (col + half + 1).min(sparse.width());
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for r in r0..r1 {
        for c in c0..c1 {
            if r == row && c == col {
                continue;
            }
            let d = sparse.at(r, c);
            if d > 0.0 {
                sum += d as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (sum / count as f64, count)
    }
}

pub fn remove_outliers(
    sparse: &SparseDepthMap,
    conf: &ConfidenceMap,
    cfg: &RemovalConfig,
) -> Result<RemovalResult> {
    cfg.validate()?;
    sparse.check_same_shape(conf)?;
    for (i, &c) in conf.as_slice().iter().enumerate() {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidConfidence {
                row: i / conf.width(),
                col: i % conf.width(),
                value: c,
            });
        }
    }

    let (h, w) = sparse.shape();
    let mut cleaned = sparse.clone();
    let mut removed = Mask::filled(h, w, false);
    let mut valid = 0usize;
    let mut kept = 0usize;
    for r in 0..h {
        for c in 0..w {
            let d = sparse.at(r, c);
            if d <= 0.0 {
                continue;
            }
            valid += 1;
            let confident = conf.at(r, c) > cfg.conf_threshold;
            let consistent = || {
                let (mean, count) = neighborhood_mean(sparse, r, c, cfg.window);
                count == 0 || (d as f64 - mean).abs() < cfg.mean_threshold
            };
            let keep = match cfg.rule {
                KeepRule::Either => confident || consistent(),
                KeepRule::Both => confident && consistent(),
            };
            if keep {
                kept += 1;
            } else {
                cleaned.set(r, c, 0.0);
                removed.set(r, c, true);
            }
        }
    }
    let keep_ratio = if valid == 0 { 1.0 } else { kept as f64 / valid as f64 };
    Ok(RemovalResult {
        cleaned,
        removed,
        keep_ratio,
    })
}

/// Quality of a sparse map against ground truth, over pixels valid in both.
///
/// Returns the metrics and the keep ratio relative to `raw_valid`, the valid
/// count of the map before any removal.
pub fn sparse_quality(
    sparse: &SparseDepthMap,
    gt: &DepthMap,
    gt_mask: &Mask,
    raw_valid: usize,
) -> Result<(MetricsReport, f64)> {
    sparse.check_same_shape(gt)?;
    let both = sparse.valid_mask().and(gt_mask)?;
    let report = compute_metrics(sparse, gt, &both)?;
    let keep_ratio = if raw_valid == 0 {
        1.0
    } else {
        sparse.valid_count() as f64 / raw_valid as f64
    };
    Ok((report, keep_ratio))
}
