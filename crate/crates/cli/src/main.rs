use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cunet::area::{nearest_fill, partition, Area};
use cunet::config::Config;
use cunet::depth_io::{read_depth_png, write_depth_png, write_gray8_png, write_mask_png};
use cunet::metrics::{sig6, CSV_HEADER};
use cunet::model::{Model, Variant};
use cunet::outlier::remove_outliers;
use cunet::scene::generate_dataset;
use cunet::train::data::read_manifest;
use cunet::train::{
    ablation_csv, ablation_sweep, density_csv, density_sweep, evaluate, evaluate_predictions, train, Dataset,
    Evaluation, TrainOutput, FINAL_CHECKPOINT,
};
use cunet::{Error, Grid};

/// Depth-only LiDAR completion with coupled local/global U-Nets.
#[derive(Parser, Debug)]
#[command(name = "cunet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (sparse, ground truth, outlier labels).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of samples (overrides data.count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model; writes per-epoch checkpoints, the log and the resolved config.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training manifest (overrides train.manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Validation manifest evaluated after each epoch (overrides eval.manifest).
        #[arg(long)]
        val_manifest: Option<PathBuf>,
    },
    /// Complete sparse depth PNGs with a trained model.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Trained model; its `config.txt` is read when present.
        #[arg(long)]
        checkpoint: PathBuf,
        /// A sparse depth PNG or a directory of them.
        #[arg(long)]
        input: PathBuf,
    },
    /// Per-area metrics of predictions (`--pred`) or of a model (`--checkpoint`).
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluation manifest (overrides eval.manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory of predicted depth PNGs named like the ground-truth files.
        #[arg(long, conflicts_with = "checkpoint")]
        pred: Option<PathBuf>,
        /// Trained model to run on the manifest's sparse inputs.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Area partition statistics and maps, with a nearest-fill baseline.
    AnalyzeAreas {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest (overrides eval.manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Confidence-gated outlier removal on one sparse depth PNG.
    RemoveOutliers {
        #[command(flatten)]
        common: Common,
        /// Sparse depth PNG.
        #[arg(long)]
        input: PathBuf,
        /// Model whose local confidence gates the removal; without it every
        /// point is screened by the neighborhood test alone.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// RMSE of a trained model on density-reduced inputs.
    DensitySweep {
        #[command(flatten)]
        common: Common,
        /// Trained model; its `config.txt` is read when present.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation manifest (overrides eval.manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated keep ratios in (0, 1].
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,0.75,1.0")]
        ratios: Vec<f64>,
    },
    /// Train and evaluate each global-input variant from a shared seed.
    Ablation {
        #[command(flatten)]
        common: Common,
        /// Training manifest (overrides train.manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Test manifest (overrides eval.manifest).
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        /// Comma-separated variants, M1 to M6.
        #[arg(long, value_delimiter = ',', default_value = "M1,M2,M3,M4,M5,M6")]
        variants: Vec<String>,
    },
}

/// Failures that map to an exit code.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

type Outcome = std::result::Result<String, Failure>;

fn resolve(common: &Common, fallback_config: Option<PathBuf>) -> Result<Config, Failure> {
    let path = common.config.clone().or(fallback_config);
    let mut cfg = Config::resolve(path.as_deref(), &common.set)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Ok(v) = std::env::var("CUNET_THREADS") {
        cfg.eval.threads = v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("CUNET_THREADS must be a non-negative integer, got `{v}`")))?;
    }
    Ok(cfg)
}

/// The config saved next to a checkpoint by `train`, if present.
fn config_beside(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.join(CONFIG_FILE);
    p.exists().then_some(p)
}

const CONFIG_FILE: &str = "config.txt";

fn out_dir(common: &Common) -> Result<&Path, Failure> {
    let dir = common
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("--out <dir> is required".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Runtime(Error::io(path, e)))
}

fn manifest(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| Failure::Usage(format!("no {what} manifest: pass --manifest or set it in the config")))
}

fn load_model(cfg: &Config, checkpoint: &Path) -> Result<Model, Failure> {
    Ok(Model::load(&cfg.model, checkpoint)?)
}

fn rmse_field(ev: &Evaluation) -> String {
    ev.aggregate.all.rmse_mm().map(sig6).unwrap_or_else(|| "null".into())
}

fn metrics_csv(tag: &str, ev: &Evaluation) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for (area, r) in ev.aggregate.rows() {
        s.push_str(&r.csv_row(tag, area));
        s.push('\n');
    }
    s
}

fn conf_to_gray8(c: &Grid<f32>) -> Vec<u8> {
    c.as_slice().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn input_pngs(input: &Path) -> Result<Vec<PathBuf>, Failure> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        Ok(files)
    } else if input.exists() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Failure::Runtime(Error::MissingFile(input.to_path_buf())))
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn run(command: Command) -> Outcome {
    match command {
        Command::GenData { common, count } => {
            let cfg = resolve(&common, None)?;
            let dir = out_dir(&common)?;
            let n = count.unwrap_or(cfg.data.count);
            let path = generate_dataset(&cfg.data.dist, n, cfg.seed, dir)?;
            Ok(format!("gen-data samples={n} manifest={} ok", path.display()))
        }
        Command::Train {
            common,
            manifest: m,
            val_manifest,
        } => {
            let cfg = resolve(&common, None)?;
            let dir = out_dir(&common)?;
            let data = Dataset::load(&manifest(&m, &cfg.train.manifest, "training")?, cfg.train.crop)?;
            let val = match val_manifest.or_else(|| cfg.eval_manifest.clone()) {
                Some(p) => Some(Dataset::load(&p, cfg.train.crop)?),
                None => None,
            };
            cfg.save(&dir.join(CONFIG_FILE))?;
            let mut model = Model::new(&cfg.model, cfg.seed)?;
            let out = TrainOutput {
                dir: Some(dir),
                validation: val.as_ref().map(|v| (v, cfg.eval)),
            };
            let log = train(&mut model, &data, &cfg.train, cfg.seed, &out)?;
            let loss = log.last_loss().map(sig6).unwrap_or_else(|| "null".into());
            Ok(format!(
                "train arch={} samples={} epochs={} params={} final_loss={loss} checkpoint={} ok",
                cfg.model.arch,
                data.len(),
                log.records.len(),
                model.param_count(),
                dir.join(FINAL_CHECKPOINT).display()
            ))
        }
        Command::Infer {
            common,
            checkpoint,
            input,
        } => {
            let cfg = resolve(&common, config_beside(&checkpoint))?;
            let model = load_model(&cfg, &checkpoint)?;
            let files = input_pngs(&input)?;
            let dir = out_dir(&common)?;
            let mut clamped = 0;
            for f in &files {
                let mut sparse = read_depth_png(f)?;
                if let Some((ch, cw)) = cfg.train.crop {
                    let (r, c) = cunet::train::data::crop_window(sparse.height(), sparse.width(), (ch, cw))?;
                    sparse = sparse.crop(r, c, ch, cw)?;
                }
                let pred = model.predict(&sparse)?;
                let name = stem(f);
                clamped += write_depth_png(&pred.depth, dir.join(format!("{name}.png")))?;
                if let Some(d) = &pred.detail {
                    let (h, w) = d.c_lu.shape();
                    write_gray8_png(dir.join(format!("{name}_conf_lu.png")), h, w, &conf_to_gray8(&d.c_lu))?;
                    write_gray8_png(dir.join(format!("{name}_conf_gu.png")), h, w, &conf_to_gray8(&d.c_gu))?;
                }
            }
            Ok(format!("infer images={} clamped={clamped} ok", files.len()))
        }
        Command::Eval {
            common,
            manifest: m,
            pred,
            checkpoint,
        } => {
            let cfg = resolve(&common, checkpoint.as_deref().and_then(config_beside))?;
            let mpath = manifest(&m, &cfg.eval_manifest, "evaluation")?;
            let (ev, tag) = match (pred, checkpoint) {
                (Some(pdir), None) => {
                    let data = Dataset::load(&mpath, None)?;
                    let preds = read_manifest(&mpath)?
                        .iter()
                        .map(|e| {
                            let name = e.gt.file_name().unwrap_or_default();
                            read_depth_png(pdir.join(name))
                        })
                        .collect::<cunet::Result<Vec<_>>>()?;
                    (evaluate_predictions(&preds, &data, cfg.eval.radius)?, "pred")
                }
                (None, Some(ck)) => {
                    let data = Dataset::load(&mpath, cfg.train.crop)?;
                    let model = load_model(&cfg, &ck)?;
                    (evaluate(&model, &data, &cfg.eval)?, "model")
                }
                _ => return Err(Failure::Usage("eval needs exactly one of --pred or --checkpoint".into())),
            };
            if let Some(dir) = &common.out {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write(&dir.join("metrics.csv"), &metrics_csv(tag, &ev))?;
            }
            Ok(format!(
                "eval samples={} valid={} rmse_mm={} ok",
                ev.per_sample.len(),
                ev.aggregate.all.valid_count,
                rmse_field(&ev)
            ))
        }
        Command::AnalyzeAreas { common, manifest: m } => {
            let cfg = resolve(&common, None)?;
            let mpath = manifest(&m, &cfg.eval_manifest, "evaluation")?;
            let data = Dataset::load(&mpath, cfg.train.crop)?;
            let dir = out_dir(&common)?;
            let maps = dir.join("partitions");
            fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
            let mut counts = String::from("sample,normal,overlap,blank\n");
            let mut totals = [0usize; 3];
            let mut baseline = Vec::with_capacity(data.len());
            for (name, s) in data.names.iter().zip(&data.samples) {
                let part = partition(&s.sparse, &s.outliers, cfg.eval.radius)?;
                part.write_png(maps.join(format!("{name}.png")))?;
                let c = Area::ALL.map(|a| part.count(a));
                for (t, v) in totals.iter_mut().zip(c) {
                    *t += v;
                }
                counts.push_str(&format!("{name},{},{},{}\n", c[0], c[1], c[2]));
                let fallback = s.sparse.as_slice().iter().copied().fold(0.0f32, f32::max).max(1.0);
                baseline.push(nearest_fill(&s.sparse, fallback));
            }
            write(&dir.join("area_counts.csv"), &counts)?;
            let ev = evaluate_predictions(&baseline, &data, cfg.eval.radius)?;
            write(&dir.join("nearest_fill_metrics.csv"), &metrics_csv("nearest_fill", &ev))?;
            Ok(format!(
                "analyze-areas samples={} normal={} overlap={} blank={} ok",
                data.len(),
                totals[0],
                totals[1],
                totals[2]
            ))
        }
        Command::RemoveOutliers {
            common,
            input,
            checkpoint,
        } => {
            let cfg = resolve(&common, checkpoint.as_deref().and_then(config_beside))?;
            if !input.exists() {
                return Err(Failure::Runtime(Error::MissingFile(input)));
            }
            let sparse = read_depth_png(&input)?;
            let conf = match &checkpoint {
                Some(ck) => match load_model(&cfg, ck)? {
                    Model::CuNet(net) => net.local_forward(&sparse)?.1,
                    Model::Single(_) => {
                        return Err(Failure::Usage("remove-outliers needs a cunet checkpoint".into()));
                    }
                },
                None => Grid::filled(sparse.height(), sparse.width(), 0.0),
            };
            let res = remove_outliers(&sparse, &conf, &cfg.model.cunet.removal)?;
            let dir = out_dir(&common)?;
            let name = stem(&input);
            write_depth_png(&res.cleaned, dir.join(format!("{name}_cleaned.png")))?;
            write_mask_png(&res.removed, dir.join(format!("{name}_removed.png")))?;
            Ok(format!("remove-outliers {} ok", res.summary()))
        }
        Command::DensitySweep {
            common,
            checkpoint,
            manifest: m,
            ratios,
        } => {
            let cfg = resolve(&common, config_beside(&checkpoint))?;
            let model = load_model(&cfg, &checkpoint)?;
            let data = Dataset::load(&manifest(&m, &cfg.eval_manifest, "evaluation")?, cfg.train.crop)?;
            let rows = density_sweep(&model, &data, &ratios, cfg.seed, &cfg.eval)?;
            let dir = out_dir(&common)?;
            write(&dir.join("density_sweep.csv"), &density_csv(&rows))?;
            Ok(format!("density-sweep rows={} ok", rows.len()))
        }
        Command::Ablation {
            common,
            manifest: m,
            test_manifest,
            variants,
        } => {
            let cfg = resolve(&common, None)?;
            let variants = variants
                .iter()
                .map(|v| v.parse::<Variant>())
                .collect::<cunet::Result<Vec<_>>>()?;
            let train_data = Dataset::load(&manifest(&m, &cfg.train.manifest, "training")?, cfg.train.crop)?;
            let test = Dataset::load(&manifest(&test_manifest, &cfg.eval_manifest, "test")?, cfg.train.crop)?;
            let dir = out_dir(&common)?;
            let rows = ablation_sweep(&cfg.model, &cfg.train, cfg.seed, &variants, &train_data, &test, &cfg.eval)?;
            write(&dir.join("ablation.csv"), &ablation_csv(&rows))?;
            Ok(format!("ablation rows={} ok", rows.len()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
