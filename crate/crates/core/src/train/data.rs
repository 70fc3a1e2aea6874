//! Datasets listed in a generation manifest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::depth_io::{read_depth_png, read_mask_png};
use crate::error::{Error, Result};
use crate::scene::{Sample, SceneDistribution};

/// Loaded samples plus the file stem of each (`00000`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub names: Vec<String>,
}

/// One manifest row with paths resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub sparse: PathBuf,
    pub gt: PathBuf,
    pub outliers: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') || line.starts_with("index\t") {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Dataset(format!("{}:{}: malformed manifest row", path.display(), n + 1));
        if cols.len() != 4 {
            return Err(bad());
        }
        let index = cols[0].parse().map_err(|_| bad())?;
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        entries.push(ManifestEntry {
            index,
            sparse: resolve(cols[1]),
            gt: resolve(cols[2]),
            outliers: resolve(cols[3]),
        });
    }
    Ok(entries)
}

/// Bottom-aligned, horizontally centered crop window.
pub fn crop_window(height: usize, width: usize, crop: (usize, usize)) -> Result<(usize, usize)> {
    let (ch, cw) = crop;
    if ch > height || cw > width {
        return Err(Error::Dataset(format!("crop {ch}x{cw} larger than {height}x{width} sample")));
    }
    Ok((height - ch, (width - cw) / 2))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads every manifest row, optionally cropping each map.
    pub fn load(manifest: &Path, crop: Option<(usize, usize)>) -> Result<Self> {
        let mut data = Dataset::default();
        for e in read_manifest(manifest)? {
            let sparse = read_depth_png(&e.sparse)?;
            let gt = read_depth_png(&e.gt)?;
            let outliers = read_mask_png(&e.outliers)?;
            sparse.check_same_shape(&gt)?;
            sparse.check_same_shape(&outliers)?;
            let name = e
                .sparse
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("{:05}", e.index));
            data.push(name, Sample { sparse, gt, outliers });
        }
        if let Some(c) = crop {
            data = data.cropped(c)?;
        }
        Ok(data)
    }

    /// Samples `offset..offset + count` drawn directly from `dist`.
    pub fn generate(dist: &SceneDistribution, seed: u64, offset: usize, count: usize) -> Result<Self> {
        let mut data = Dataset::default();
        for i in offset..offset + count {
            data.push(format!("{i:05}"), dist.sample(seed, i as u64)?);
        }
        Ok(data)
    }

    pub fn push(&mut self, name: String, sample: Sample) {
        self.names.push(name);
        self.samples.push(sample);
    }

    pub fn cropped(&self, crop: (usize, usize)) -> Result<Self> {
        let mut out = Dataset::default();
        for (name, s) in self.names.iter().zip(&self.samples) {
            let (r, c) = crop_window(s.sparse.height(), s.sparse.width(), crop)?;
            out.push(
                name.clone(),
                Sample {
                    sparse: s.sparse.crop(r, c, crop.0, crop.1)?,
                    gt: s.gt.crop(r, c, crop.0, crop.1)?,
                    outliers: s.outliers.crop(r, c, crop.0, crop.1)?,
                },
            );
        }
        Ok(out)
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        (
            Dataset {
                samples: self.samples[..n].to_vec(),
                names: self.names[..n].to_vec(),
            },
            Dataset {
                samples: self.samples[n..].to_vec(),
                names: self.names[n..].to_vec(),
            },
        )
    }
}
