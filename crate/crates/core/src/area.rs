//! Normal / overlap / blank partition of the image and per-area evaluation.
//!
//! Valid measurements are dilated to get the measured area; dilated outlier
//! points form the overlap area. Normal is measured minus overlap and blank
//! is whatever is left.

use std::collections::VecDeque;
use std::path::Path;

use crate::depth_io::write_gray8_png;
use crate::error::Result;
use crate::grid::{DepthMap, Grid, Mask, SparseDepthMap};
use crate::metrics::{MetricsAccumulator, MetricsReport};

/// Default dilation radius (5x5 square).
pub const DEFAULT_RADIUS: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Area {
    #[default]
    Blank,
    Normal,
    Overlap,
}

impl Area {
    pub const ALL: [Area; 3] = [Area::Normal, Area::Overlap, Area::Blank];

    pub fn name(self) -> &'static str {
        match self {
            Area::Blank => "blank",
            Area::Normal => "normal",
            Area::Overlap => "overlap",
        }
    }

    /// Gray level used by the partition PNG export.
    pub fn gray_level(self) -> u8 {
        match self {
            Area::Blank => 0,
            Area::Normal => 128,
            Area::Overlap => 255,
        }
    }
}

/// Square-window binary dilation: a pixel is set iff some set pixel lies in
/// the `(2r+1) x (2r+1)` window around it.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.shape();
    // separable: rows first, then columns, each via a prefix count
    let mut rows = Grid::filled(h, w, false);
    let mut prefix = vec![0usize; w.max(h) + 1];
    for r in 0..h {
        for c in 0..w {
            prefix[c + 1] = prefix[c] + mask.at(r, c) as usize;
        }
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius + 1).min(w);
            rows.set(r, c, prefix[hi] > prefix[lo]);
        }
    }
    let mut out = Grid::filled(h, w, false);
    for c in 0..w {
        for r in 0..h {
            prefix[r + 1] = prefix[r] + rows.at(r, c) as usize;
        }
        for r in 0..h {
            let lo = r.saturating_sub(radius);
            let hi = (r + radius + 1).min(h);
            out.set(r, c, prefix[hi] > prefix[lo]);
        }
    }
    out
}

/// Per-pixel area labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaPartition {
    labels: Grid<Area>,
}

impl AreaPartition {
    pub fn labels(&self) -> &Grid<Area> {
        &self.labels
    }

    pub fn shape(&self) -> (usize, usize) {
        self.labels.shape()
    }

    pub fn mask(&self, area: Area) -> Mask {
        self.labels.map(|&a| a == area)
    }

    pub fn count(&self, area: Area) -> usize {
        self.labels.as_slice().iter().filter(|&&a| a == area).count()
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.labels.as_slice().iter().map(|a| a.gray_level()).collect()
    }

    /// 8-bit PNG: 0 = blank, 128 = normal, 255 = overlap.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = self.shape();
        write_gray8_png(path, h, w, &self.to_gray8())
    }
}

/// Builds the partition from the sparse map and its outlier points.
pub fn partition(sparse: &SparseDepthMap, outliers: &Mask, radius: usize) -> Result<AreaPartition> {
    sparse.check_same_shape(outliers)?;
    let measured = dilate(&sparse.valid_mask(), radius);
    let overlap = dilate(outliers, radius);
    let labels = Grid::from_fn(sparse.height(), sparse.width(), |r, c| {
        if overlap.at(r, c) {
            Area::Overlap
        } else if measured.at(r, c) {
            Area::Normal
        } else {
            Area::Blank
        }
    });
    Ok(AreaPartition { labels })
}

/// Metrics over all evaluated pixels and over each area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AreaReports {
    pub all: MetricsReport,
    pub normal: MetricsReport,
    pub overlap: MetricsReport,
    pub blank: MetricsReport,
}

impl AreaReports {
    pub fn get(&self, area: Area) -> &MetricsReport {
        match area {
            Area::Normal => &self.normal,
            Area::Overlap => &self.overlap,
            Area::Blank => &self.blank,
        }
    }

    /// `(area name, report)` in CSV order: all, normal, overlap, blank.
    pub fn rows(&self) -> [(&'static str, &MetricsReport); 4] {
        [
            ("all", &self.all),
            ("normal", &self.normal),
            ("overlap", &self.overlap),
            ("blank", &self.blank),
        ]
    }
}

/// Pooled accumulators for the four area reports.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AreaAccumulator {
    pub all: MetricsAccumulator,
    pub normal: MetricsAccumulator,
    pub overlap: MetricsAccumulator,
    pub blank: MetricsAccumulator,
}

impl AreaAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every pixel of `gt_mask`, routed to its area.
    pub fn add(&mut self, pred: &DepthMap, gt: &DepthMap, gt_mask: &Mask, part: &AreaPartition) -> Result<()> {
        pred.check_same_shape(gt)?;
        pred.check_same_shape(gt_mask)?;
        pred.check_same_shape(&part.labels)?;
        for area in Area::ALL {
            let mask = gt_mask.and(&part.mask(area))?;
            let mut acc = MetricsAccumulator::new();
            crate::metrics::accumulate(pred, gt, &mask, &mut acc)?;
            self.slot(area).merge(&acc);
            self.all.merge(&acc);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &AreaAccumulator) {
        self.all.merge(&other.all);
        self.normal.merge(&other.normal);
        self.overlap.merge(&other.overlap);
        self.blank.merge(&other.blank);
    }

    fn slot(&mut self, area: Area) -> &mut MetricsAccumulator {
        match area {
            Area::Normal => &mut self.normal,
            Area::Overlap => &mut self.overlap,
            Area::Blank => &mut self.blank,
        }
    }

    pub fn report(&self) -> AreaReports {
        AreaReports {
            all: self.all.report(),
            normal: self.normal.report(),
            overlap: self.overlap.report(),
            blank: self.blank.report(),
        }
    }
}

/// Metrics over `gt_mask` ("all") and over `gt_mask` restricted to each area.
pub fn per_area_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    gt_mask: &Mask,
    part: &AreaPartition,
) -> Result<AreaReports> {
    let mut acc = AreaAccumulator::new();
    acc.add(pred, gt, gt_mask, part)?;
    Ok(acc.report())
}

/// Nearest-measurement fill (4-connected BFS): a non-learned baseline
/// completion. A map without any measurement is filled with `fallback`.
pub fn nearest_fill(sparse: &SparseDepthMap, fallback: f32) -> DepthMap {
    let (h, w) = sparse.shape();
    let mut out = sparse.clone();
    let mut seen = sparse.valid_mask();
    let mut queue: VecDeque<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| seen.at(r, c))
        .collect();
    if queue.is_empty() {
        return Grid::filled(h, w, fallback);
    }
    while let Some((r, c)) = queue.pop_front() {
        let d = out.at(r, c);
        let neighbors = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for (nr, nc) in neighbors {
            if nr < h && nc < w && !seen.at(nr, nc) {
                seen.set(nr, nc, true);
                out.set(nr, nc, d);
                queue.push_back((nr, nc));
            }
        }
    }
    out
}
