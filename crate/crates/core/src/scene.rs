//! Synthetic 2.5D scenes with dense ground truth, scan-line LiDAR sampling
//! and parallax outliers (background returns landing on foreground objects
//! near their edges).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::depth_io::{write_depth_png, write_mask_png};
use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid, Mask, SparseDepthMap};

/// Direction along which the background plane recedes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tilt {
    /// Far at the top row, near at the bottom row (road-like).
    Vertical,
    /// Far at the left column, near at the right column.
    Horizontal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Background {
    pub near_m: f32,
    pub far_m: f32,
    pub tilt: Tilt,
}

/// Axis-aligned fronto-parallel rectangle. Its depth ramps linearly from
/// `depth - depth_jitter` at the left edge to `depth + depth_jitter` at the
/// right edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub depth: f32,
    pub depth_jitter: f32,
}

impl SceneObject {
    #[cfg(test)]
    fn covers(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.top + self.height && c >= self.left && c < self.left + self.width
    }

    fn depth_at(&self, c: usize) -> f32 {
        if self.width <= 1 {
            return self.depth;
        }
        let t = (c - self.left) as f32 / (self.width - 1) as f32;
        self.depth + self.depth_jitter * (2.0 * t - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: Background,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    fn background_at(&self, r: usize, c: usize) -> f32 {
        let bg = &self.background;
        let t = match bg.tilt {
            Tilt::Vertical if self.height > 1 => r as f32 / (self.height - 1) as f32,
            Tilt::Horizontal if self.width > 1 => c as f32 / (self.width - 1) as f32,
            _ => 0.0,
        };
        bg.far_m + (bg.near_m - bg.far_m) * t
    }

    pub fn validate(&self) -> Result<()> {
        let bg = &self.background;
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec("empty image".into()));
        }
        if !(bg.near_m > 0.0 && bg.far_m > 0.0 && bg.near_m.is_finite() && bg.far_m.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "background depths must be positive and finite (near {}, far {})",
                bg.near_m, bg.far_m
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.height == 0 || o.width == 0 || o.top + o.height > self.height || o.left + o.width > self.width {
                return Err(Error::InvalidSpec(format!("object {i} lies outside the image")));
            }
            for r in o.top..o.top + o.height {
                for c in o.left..o.left + o.width {
                    let d = o.depth_at(c);
                    if !(d > 0.0 && d.is_finite()) {
                        return Err(Error::InvalidSpec(format!("object {i} has non-positive depth {d}")));
                    }
                    if d >= self.background_at(r, c) {
                        return Err(Error::InvalidSpec(format!(
                            "object {i} at ({r}, {c}) is not in front of the background"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ground truth together with the layer structure needed for outlier simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub gt: DepthMap,
    pub background: DepthMap,
    /// Index of the visible object per pixel; `None` where the background shows.
    pub owner: Grid<Option<usize>>,
}

pub fn render(spec: &SceneSpec) -> Result<RenderedScene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let background = Grid::from_fn(h, w, |r, c| spec.background_at(r, c));
    let mut gt = background.clone();
    let mut owner = Grid::filled(h, w, None);
    for (i, o) in spec.objects.iter().enumerate() {
        for r in o.top..o.top + o.height {
            for c in o.left..o.left + o.width {
                let d = o.depth_at(c);
                if d < gt.at(r, c) {
                    gt.set(r, c, d);
                    owner.set(r, c, Some(i));
                }
            }
        }
    }
    Ok(RenderedScene { gt, background, owner })
}

/// Per-pixel minimum over the background ramp and every covering object.
pub fn render_ground_truth(spec: &SceneSpec) -> Result<DepthMap> {
    Ok(render(spec)?.gt)
}

/// Scan-grid layout of the simulated LiDAR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPattern {
    pub row_stride: usize,
    pub col_stride: usize,
    /// Maximum per-sample offset in pixels, applied independently to row and column.
    pub jitter: usize,
    /// Probability of dropping each scan sample.
    pub dropout: f64,
}

impl Default for LidarPattern {
    fn default() -> Self {
        Self {
            row_stride: 4,
            col_stride: 3,
            jitter: 0,
            dropout: 0.1,
        }
    }
}

impl LidarPattern {
    pub fn validate(&self) -> Result<()> {
        if self.row_stride == 0 || self.col_stride == 0 {
            return Err(Error::InvalidSpec("scan strides must be >= 1".into()));
        }
        if 2 * self.jitter >= self.row_stride.min(self.col_stride) {
            return Err(Error::InvalidSpec(format!(
                "jitter {} must be below half the smallest stride",
                self.jitter
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidSpec(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Foreground pixels within `band` (Chebyshev) of a deeper, differently owned pixel.
pub fn edge_band(scene: &RenderedScene, band: usize) -> Mask {
    let (h, w) = scene.gt.shape();
    Grid::from_fn(h, w, |r, c| {
        let Some(me) = scene.owner.at(r, c) else {
            return false;
        };
        let d = scene.gt.at(r, c);
        for rr in r.saturating_sub(band)..(r + band + 1).min(h) {
            for cc in c.saturating_sub(band)..(c + band + 1).min(w) {
                if scene.owner.at(rr, cc) != Some(me) && scene.gt.at(rr, cc) > d {
                    return true;
                }
            }
        }
        false
    })
}

/// Samples the scene on a jittered scan grid.
///
/// Foreground samples within `boundary_band` pixels of an object edge are,
/// with probability `outlier_rate`, replaced by the background depth at that
/// pixel and flagged in the returned outlier mask.
pub fn sample_lidar(
    scene: &RenderedScene,
    pattern: &LidarPattern,
    outlier_rate: f64,
    boundary_band: usize,
    seed: u64,
) -> Result<(SparseDepthMap, Mask)> {
    pattern.validate()?;
    if !(0.0..=1.0).contains(&outlier_rate) {
        return Err(Error::InvalidSpec(format!("outlier rate {outlier_rate} outside [0, 1]")));
    }
    if boundary_band == 0 {
        return Err(Error::InvalidSpec("boundary band must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = scene.gt.shape();
    let band = edge_band(scene, boundary_band);
    let mut sparse = Grid::filled(h, w, 0.0f32);
    let mut outliers = Grid::filled(h, w, false);
    let j = pattern.jitter as i64;
    for r0 in (0..h).step_by(pattern.row_stride) {
        for c0 in (0..w).step_by(pattern.col_stride) {
            let dr = rng.gen_range(-j..=j);
            let dc = rng.gen_range(-j..=j);
            let drop = rng.gen::<f64>() < pattern.dropout;
            let flip = rng.gen::<f64>() < outlier_rate;
            if drop {
                continue;
            }
            let r = (r0 as i64 + dr).clamp(0, h as i64 - 1) as usize;
            let c = (c0 as i64 + dc).clamp(0, w as i64 - 1) as usize;
            if flip && band.at(r, c) {
                sparse.set(r, c, scene.background.at(r, c));
                outliers.set(r, c, true);
            } else {
                sparse.set(r, c, scene.gt.at(r, c));
            }
        }
    }
    Ok((sparse, outliers))
}

/// Distribution of random scenes used for dataset generation.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDistribution {
    pub height: usize,
    pub width: usize,
    pub near_m: (f32, f32),
    pub far_m: (f32, f32),
    pub objects: (usize, usize),
    pub object_height: (usize, usize),
    pub object_width: (usize, usize),
    /// Minimum depth gap between an object and the background behind it.
    pub min_gap_m: f32,
    pub max_depth_jitter_m: f32,
    pub pattern: LidarPattern,
    pub outlier_rate: f64,
    pub boundary_band: usize,
    /// Rectangles without any LiDAR return per scene (absorbing surfaces).
    pub holes: (usize, usize),
    pub hole_height: (usize, usize),
    pub hole_width: (usize, usize),
    /// Fraction of ground-truth pixels zeroed to mimic semi-dense supervision.
    pub gt_dropout: f64,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            height: 64,
            width: 192,
            near_m: (4.0, 8.0),
            far_m: (40.0, 80.0),
            objects: (2, 6),
            object_height: (10, 40),
            object_width: (10, 60),
            min_gap_m: 4.0,
            max_depth_jitter_m: 1.0,
            pattern: LidarPattern::default(),
            outlier_rate: 0.5,
            boundary_band: 3,
            holes: (0, 3),
            hole_height: (6, 16),
            hole_width: (10, 30),
            gt_dropout: 0.0,
        }
    }
}

fn range_usize(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn range_f32(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// One generated training/evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sparse: SparseDepthMap,
    pub gt: DepthMap,
    pub outliers: Mask,
}

impl SceneDistribution {
    /// Draws a valid scene; objects that cannot fit in front of the background are skipped.
    pub fn draw_scene(&self, rng: &mut ChaCha8Rng) -> SceneSpec {
        let (h, w) = (self.height, self.width);
        let background = Background {
            near_m: range_f32(rng, self.near_m),
            far_m: range_f32(rng, self.far_m),
            tilt: Tilt::Vertical,
        };
        let mut spec = SceneSpec {
            height: h,
            width: w,
            background,
            objects: Vec::new(),
        };
        let n = range_usize(rng, self.objects);
        for _ in 0..n {
            let oh = range_usize(rng, self.object_height).clamp(1, h);
            let ow = range_usize(rng, self.object_width).clamp(1, w);
            let top = rng.gen_range(0..=h - oh);
            let left = rng.gen_range(0..=w - ow);
            let jitter = range_f32(rng, (0.0, self.max_depth_jitter_m));
            // the background is nearest on the object's bottom row
            let bg_min = (top..top + oh)
                .flat_map(|r| [spec.background_at(r, left), spec.background_at(r, left + ow - 1)])
                .fold(f32::INFINITY, f32::min);
            let lo = background.near_m.min(bg_min) * 0.5 + jitter;
            let hi = bg_min - self.min_gap_m - jitter;
            let u: f32 = rng.gen();
            if hi <= lo {
                continue;
            }
            spec.objects.push(SceneObject {
                top,
                left,
                height: oh,
                width: ow,
                depth: lo + (hi - lo) * u,
                depth_jitter: jitter,
            });
        }
        spec
    }

    /// Deterministic sample for `(seed, index)`; independent of generation order.
    pub fn sample(&self, seed: u64, index: u64) -> Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let spec = self.draw_scene(&mut rng);
        let scene = render(&spec)?;
        let lidar_seed = rng.gen();
        let (mut sparse, mut outliers) =
            sample_lidar(&scene, &self.pattern, self.outlier_rate, self.boundary_band, lidar_seed)?;
        let holes = range_usize(&mut rng, self.holes);
        for _ in 0..holes {
            let hh = range_usize(&mut rng, self.hole_height).clamp(1, self.height);
            let hw = range_usize(&mut rng, self.hole_width).clamp(1, self.width);
            let top = rng.gen_range(0..=self.height - hh);
            let left = rng.gen_range(0..=self.width - hw);
            for r in top..top + hh {
                for c in left..left + hw {
                    sparse.set(r, c, 0.0);
                    outliers.set(r, c, false);
                }
            }
        }
        let mut gt = scene.gt;
        if self.gt_dropout > 0.0 {
            for d in gt.as_mut_slice() {
                if rng.gen::<f64>() < self.gt_dropout {
                    *d = 0.0;
                }
            }
        }
        Ok(Sample { sparse, gt, outliers })
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "height={} width={} near_m={:?} far_m={:?} objects={:?} object_height={:?} object_width={:?} \
             min_gap_m={} max_depth_jitter_m={} row_stride={} col_stride={} jitter={} dropout={} \
             outlier_rate={} boundary_band={} holes={:?} hole_height={:?} hole_width={:?} gt_dropout={}",
            self.height,
            self.width,
            self.near_m,
            self.far_m,
            self.objects,
            self.object_height,
            self.object_width,
            self.min_gap_m,
            self.max_depth_jitter_m,
            self.pattern.row_stride,
            self.pattern.col_stride,
            self.pattern.jitter,
            self.pattern.dropout,
            self.outlier_rate,
            self.boundary_band,
            self.holes,
            self.hole_height,
            self.hole_width,
            self.gt_dropout
        );
        s
    }
}

/// Column header line of a dataset manifest.
pub const MANIFEST_COLUMNS: &str = "index\tsparse_path\tgt_path\toutlier_path";

/// Writes `count` samples under `out_dir` (`sparse/`, `gt/`, `outliers/`)
/// and a `manifest.tsv` with paths relative to `out_dir`.
pub fn generate_dataset(dist: &SceneDistribution, count: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    for sub in ["sparse", "gt", "outliers"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = String::new();
    let _ = writeln!(manifest, "# cunet synthetic dataset");
    let _ = writeln!(manifest, "# seed={seed} count={count}");
    let _ = writeln!(manifest, "# {}", dist.describe());
    let _ = writeln!(manifest, "{MANIFEST_COLUMNS}");
    for i in 0..count {
        let sample = dist.sample(seed, i as u64)?;
        let name = format!("{i:05}.png");
        let rel = |sub: &str| format!("{sub}/{name}");
        write_depth_png(&sample.sparse, out_dir.join(rel("sparse")))?;
        write_depth_png(&sample.gt, out_dir.join(rel("gt")))?;
        write_mask_png(&sample.outliers, out_dir.join(rel("outliers")))?;
        let _ = writeln!(manifest, "{i}\t{}\t{}\t{}", rel("sparse"), rel("gt"), rel("outliers"));
    }
    let path = out_dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
