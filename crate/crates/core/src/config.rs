//! Run configuration as line-based `key = value` text.
//!
//! Keys are dotted (`model.variant`, `train.lr`, ...). Blank lines and lines
//! starting with `#` are ignored. Values are layered: built-in defaults, then
//! a file, then individual overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::outlier::KeepRule;
use crate::scene::SceneDistribution;
use crate::train::{EvalConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dist: SceneDistribution,
    pub count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dist: SceneDistribution::default(),
            count: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub eval_manifest: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_pair<T: FromStr + Copy>(key: &str, value: &str) -> Result<(T, T)> {
    match parse_list::<T>(key, value)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("{key} expects two comma-separated values, got `{value}`"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn pair<T: ToString>(p: (T, T)) -> String {
    format!("{},{}", p.0.to_string(), p.1.to_string())
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl Config {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let m = &mut self.model.cunet;
        let t = &mut self.train;
        let d = &mut self.data.dist;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "model.arch" => self.model.arch = value.parse()?,
            "model.channels" => m.level_channels = parse_list(key, value)?,
            "model.variant" => m.variant = value.parse()?,
            "model.depth_scale" => m.depth_scale = parse(key, value)?,
            "model.lambda_lu" => m.weights.local = parse(key, value)?,
            "model.lambda_gu" => m.weights.global = parse(key, value)?,
            "model.lambda_fused" => m.weights.fused = parse(key, value)?,
            "model.stop_gradient" => m.stop_gradient = parse_bool(key, value)?,
            "model.normalize_loss" => m.normalize_loss = parse_bool(key, value)?,
            "removal.conf_threshold" => m.removal.conf_threshold = parse(key, value)?,
            "removal.mean_threshold" => m.removal.mean_threshold = parse(key, value)?,
            "removal.window" => m.removal.window = parse(key, value)?,
            "removal.rule" => {
                m.removal.rule = match value.trim() {
                    "either" => KeepRule::Either,
                    "both" => KeepRule::Both,
                    v => return Err(Error::Config(format!("removal.rule must be either or both, got `{v}`"))),
                }
            }
            "train.manifest" => t.manifest = parse_path(value),
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.lr_decay_factor" => t.lr_decay_factor = parse(key, value)?,
            "train.lr_decay_every" => t.lr_decay_every = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.crop" => {
                t.crop = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse_pair(key, v)?),
                }
            }
            "data.count" => self.data.count = parse(key, value)?,
            "data.height" => d.height = parse(key, value)?,
            "data.width" => d.width = parse(key, value)?,
            "data.near_m" => d.near_m = parse_pair(key, value)?,
            "data.far_m" => d.far_m = parse_pair(key, value)?,
            "data.objects" => d.objects = parse_pair(key, value)?,
            "data.object_height" => d.object_height = parse_pair(key, value)?,
            "data.object_width" => d.object_width = parse_pair(key, value)?,
            "data.min_gap_m" => d.min_gap_m = parse(key, value)?,
            "data.max_depth_jitter_m" => d.max_depth_jitter_m = parse(key, value)?,
            "data.row_stride" => d.pattern.row_stride = parse(key, value)?,
            "data.col_stride" => d.pattern.col_stride = parse(key, value)?,
            "data.jitter" => d.pattern.jitter = parse(key, value)?,
            "data.dropout" => d.pattern.dropout = parse(key, value)?,
            "data.outlier_rate" => d.outlier_rate = parse(key, value)?,
            "data.boundary_band" => d.boundary_band = parse(key, value)?,
            "data.holes" => d.holes = parse_pair(key, value)?,
            "data.hole_height" => d.hole_height = parse_pair(key, value)?,
            "data.hole_width" => d.hole_width = parse_pair(key, value)?,
            "data.gt_dropout" => d.gt_dropout = parse(key, value)?,
            "eval.manifest" => self.eval_manifest = parse_path(value),
            "eval.radius" => self.eval.radius = parse(key, value)?,
            "eval.batch_size" => self.eval.batch_size = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model.cunet;
        let t = &self.train;
        let d = &self.data.dist;
        vec![
            ("seed", self.seed.to_string()),
            ("model.arch", self.model.arch.to_string()),
            ("model.channels", join(&m.level_channels)),
            ("model.variant", m.variant.to_string()),
            ("model.depth_scale", m.depth_scale.to_string()),
            ("model.lambda_lu", m.weights.local.to_string()),
            ("model.lambda_gu", m.weights.global.to_string()),
            ("model.lambda_fused", m.weights.fused.to_string()),
            ("model.stop_gradient", m.stop_gradient.to_string()),
            ("model.normalize_loss", m.normalize_loss.to_string()),
            ("removal.conf_threshold", m.removal.conf_threshold.to_string()),
            ("removal.mean_threshold", m.removal.mean_threshold.to_string()),
            ("removal.window", m.removal.window.to_string()),
            (
                "removal.rule",
                match m.removal.rule {
                    KeepRule::Either => "either".into(),
                    KeepRule::Both => "both".into(),
                },
            ),
            ("train.manifest", path_str(&t.manifest)),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.lr_decay_factor", t.lr_decay_factor.to_string()),
            ("train.lr_decay_every", t.lr_decay_every.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.crop", t.crop.map(pair).unwrap_or_else(|| "none".into())),
            ("data.count", self.data.count.to_string()),
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.near_m", pair(d.near_m)),
            ("data.far_m", pair(d.far_m)),
            ("data.objects", pair(d.objects)),
            ("data.object_height", pair(d.object_height)),
            ("data.object_width", pair(d.object_width)),
            ("data.min_gap_m", d.min_gap_m.to_string()),
            ("data.max_depth_jitter_m", d.max_depth_jitter_m.to_string()),
            ("data.row_stride", d.pattern.row_stride.to_string()),
            ("data.col_stride", d.pattern.col_stride.to_string()),
            ("data.jitter", d.pattern.jitter.to_string()),
            ("data.dropout", d.pattern.dropout.to_string()),
            ("data.outlier_rate", d.outlier_rate.to_string()),
            ("data.boundary_band", d.boundary_band.to_string()),
            ("data.holes", pair(d.holes)),
            ("data.hole_height", pair(d.hole_height)),
            ("data.hole_width", pair(d.hole_width)),
            ("data.gt_dropout", d.gt_dropout.to_string()),
            ("eval.manifest", path_str(&self.eval_manifest)),
            ("eval.radius", self.eval.radius.to_string()),
            ("eval.batch_size", self.eval.batch_size.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k, v)
    }

    /// Defaults, then `path` (if any), then `overrides`; validated.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Config::default();
        if let Some(p) = path {
            if !p.exists() {
                return Err(Error::MissingFile(p.to_path_buf()));
            }
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.cunet.validate()?;
        self.train.validate()?;
        self.data.dist.pattern.validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, Variant};

    #[test]
    fn text_roundtrip_covers_every_key() {
        let mut cfg = Config {
            seed: 42,
            ..Default::default()
        };
        cfg.model.arch = Arch::Single;
        cfg.model.cunet.variant = Variant::M3;
        cfg.train.crop = Some((32, 96));
        cfg.train.manifest = Some("data/manifest.tsv".into());
        cfg.data.dist.near_m = (3.5, 9.25);
        let mut back = Config::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        for (k, v) in cfg.entries() {
            let mut c = Config::default();
            c.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn precedence_defaults_file_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\n\ntrain.epochs = 3\nmodel.variant = M1\n").unwrap();
        let cfg = Config::resolve(Some(&path), &["train.epochs=7".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.cunet.variant, Variant::M1);
        assert_eq!(cfg.train.batch_size, 6);
    }

    #[test]
    fn errors_are_reported() {
        let mut cfg = Config::default();
        assert!(cfg.set("train.nope", "1").is_err());
        assert!(cfg.set("train.epochs", "many").is_err());
        assert!(cfg.apply_text("train.epochs 3").is_err());
        assert!(cfg.apply_override("seed").is_err());
        assert!(Config::resolve(None, &["removal.window=4".into()]).is_err());
        assert!(Config::resolve(None, &["model.channels=8".into()]).is_err());
        assert!(Config::resolve(Some(Path::new("/no/such/file")), &[]).is_err());
    }
}
