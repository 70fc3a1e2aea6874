//! KITTI-style depth PNG encoding and density subsampling.
//!
//! Depth maps are stored as 16-bit single-channel PNGs where
//! `depth_m = value / 256` and `value == 0` marks a missing measurement.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, SparseDepthMap};

/// Stored units per meter.
pub const DEPTH_SCALE: f32 = 256.0;

/// Reads a 16-bit grayscale KITTI depth PNG into meters.
pub fn read_depth_png(path: impl AsRef<Path>) -> Result<SparseDepthMap> {
    let (height, width, raw) = read_png16(path.as_ref())?;
    let data = raw.into_iter().map(|v| v as f32 / DEPTH_SCALE).collect();
    Grid::from_vec(height, width, data)
}

/// Writes depths as a 16-bit KITTI PNG.
///
/// Values are rounded to the nearest 1/256 m. Depths that do not fit into 16
/// bits are clamped to 65535; the number of clamped pixels is returned.
pub fn write_depth_png(map: &Grid<f32>, path: impl AsRef<Path>) -> Result<usize> {
    let (values, clamped) = quantize(map);
    write_png16(path.as_ref(), map.height(), map.width(), &values)?;
    Ok(clamped)
}

/// Quantizes meters into KITTI storage values, returning the clamp tally.
pub fn quantize(map: &Grid<f32>) -> (Vec<u16>, usize) {
    let mut clamped = 0;
    let values = map
        .as_slice()
        .iter()
        .map(|&d| {
            let v = (d as f64 * DEPTH_SCALE as f64).round();
            if v.is_nan() || v < 0.0 {
                // negative or NaN: treated as missing
                0
            } else if v > u16::MAX as f64 {
                clamped += 1;
                u16::MAX
            } else {
                v as u16
            }
        })
        .collect();
    (values, clamped)
}

/// Outlier-label PNG: flagged pixels are stored as 256 (1.0 m in depth units).
pub fn write_mask_png(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let values: Vec<u16> = mask
        .as_slice()
        .iter()
        .map(|&b| if b { DEPTH_SCALE as u16 } else { 0 })
        .collect();
    write_png16(path.as_ref(), mask.height(), mask.width(), &values)
}

pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let (height, width, raw) = read_png16(path.as_ref())?;
    Grid::from_vec(height, width, raw.into_iter().map(|v| v > 0).collect())
}

/// Keeps every valid pixel independently with probability `ratio`.
pub fn subsample(map: &SparseDepthMap, ratio: f64, seed: u64) -> Result<SparseDepthMap> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = map.clone();
    for d in out.as_mut_slice() {
        if *d > 0.0 && rng.gen::<f64>() >= ratio {
            *d = 0.0;
        }
    }
    Ok(out)
}

fn read_png16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::NotPng16 {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected single-channel grayscale, found {:?}", info.color_type),
        });
    }
    if info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected 16-bit samples, found {:?}", info.bit_depth),
        });
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    reader.next_frame(&mut buf).map_err(|e| Error::NotPng16 {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let values = buf[..width * height * 2]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((height, width, values))
}

fn write_png16(path: &Path, height: usize, width: usize, values: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, height, width, png::BitDepth::Sixteen, &bytes)
}

/// Writes an 8-bit grayscale PNG (visualizations only).
pub fn write_gray8_png(path: impl AsRef<Path>, height: usize, width: usize, values: &[u8]) -> Result<()> {
    write_png(path.as_ref(), height, width, png::BitDepth::Eight, values)
}

fn write_png(path: &Path, height: usize, width: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(depth);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other)),
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(values: &[f32]) -> (Vec<f32>, usize) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let map = Grid::from_vec(1, values.len(), values.to_vec()).unwrap();
        let clamped = write_depth_png(&map, &path).unwrap();
        (read_depth_png(&path).unwrap().into_vec(), clamped)
    }

    #[test]
    fn decodes_kitti_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.png");
        write_png16(&path, 1, 3, &[256, 0, 21845]).unwrap();
        let m = read_depth_png(&path).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 0.0, 85.332_03]);
        assert_eq!(m.valid_count(), 2);
    }

    #[test]
    fn write_read_identity_and_clamp() {
        assert_eq!(roundtrip(&[1.0, 0.0]), (vec![1.0, 0.0], 0));
        let (v, clamped) = roundtrip(&[300.0]);
        assert_eq!(v, vec![255.996_1]);
        assert_eq!(clamped, 1);
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(read_depth_png(&missing), Err(Error::MissingFile(_))));

        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"definitely not a png").unwrap();
        assert!(matches!(read_depth_png(&junk), Err(Error::NotPng16 { .. })));

        let eight = dir.path().join("eight.png");
        write_gray8_png(&eight, 2, 2, &[0, 1, 2, 3]).unwrap();
        assert!(matches!(read_depth_png(&eight), Err(Error::Format { .. })));

        let rgb = dir.path().join("rgb.png");
        let file = File::create(&rgb).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 1, 1);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Sixteen);
        enc.write_header().unwrap().write_image_data(&[0; 6]).unwrap();
        assert!(matches!(read_depth_png(&rgb), Err(Error::Format { .. })));
    }

    #[test]
    fn mask_png_uses_256() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = Grid::from_vec(1, 3, vec![true, false, true]).unwrap();
        write_mask_png(&mask, &path).unwrap();
        assert_eq!(read_depth_png(&path).unwrap().as_slice(), &[1.0, 0.0, 1.0]);
        assert_eq!(read_mask_png(&path).unwrap(), mask);
    }

    #[test]
    fn subsample_contract() {
        let map = Grid::from_fn(100, 100, |r, c| if (r + c) % 3 == 0 { 0.0 } else { 5.0 });
        assert_eq!(subsample(&map, 1.0, 3).unwrap(), map);
        assert!(matches!(subsample(&map, 0.0, 3), Err(Error::InvalidRatio(_))));
        assert!(matches!(subsample(&map, 1.5, 3), Err(Error::InvalidRatio(_))));

        let a = subsample(&map, 0.3, 9).unwrap();
        assert_eq!(a, subsample(&map, 0.3, 9).unwrap());
        assert!(a.valid_mask().is_subset_of(&map.valid_mask()));
    }

    #[test]
    fn subsample_binomial_count() {
        let map = Grid::filled(100, 100, 7.0f32);
        for seed in 0..5 {
            let kept = subsample(&map, 0.5, seed).unwrap().valid_count() as f64;
            // n = 10000, p = 0.5: sigma = 50
            assert!((kept - 5000.0).abs() <= 150.0, "kept {kept}");
        }
    }
}
