//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use image::RgbImage;

use crate::config::{AppConfig, DATA_ROOT_ENV};
use crate::data::{self, index_dataset, load_videos, read_rgb, Split, SynthMeta, SynthSpec, Video};
use crate::decoder::BranchSet;
use crate::encoder::export_features;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_directory, EvalOptions, PoolSpec};
use crate::model::SalFoM;
use crate::pipeline::{self, feature_path, AblationOptions, AblationSpec, FeatureSource};
use crate::resample;

#[derive(Debug, Parser)]
#[command(name = "salfom", version, about = "Video saliency prediction: data, training, inference, evaluation")]
pub struct Cli {
    /// TOML configuration with [encoder], [decoder], [train], [data] and [ablation] sections.
    #[arg(long, global = true, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Seed for data generation, initialisation and sample order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 224x224 inputs, 16-frame windows.
    Toy,
    /// 64x64 inputs, 4-frame windows; trains on a CPU in minutes.
    Desk,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic moving-blob dataset.
    Synth {
        #[arg(long, default_value_t = 2)]
        videos: usize,
        #[arg(long, default_value_t = 1)]
        val_videos: usize,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 12)]
        fixations: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on <data>/train with early stopping on <data>/val.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for model.ckpt and train_log.jsonl.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        freeze_encoder: bool,
        /// Train the decoder on pre-extracted features from this directory.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Write one 8-bit map per frame for every video of a split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write side-by-side frame / heat-map overlays here, one
        /// directory per video.
        #[arg(long)]
        overlays: Option<PathBuf>,
    },
    /// Score predicted maps against a split's annotations.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Directory for report.jsonl and report.csv.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = crate::metrics::DEFAULT_SPLITS)]
        splits: usize,
        #[arg(long, value_enum, default_value_t = PoolArg::OtherVideos)]
        pool: PoolArg,
    },
    /// Train and score model variants under one seed and budget.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Branch set of one variant, e.g. `TCFE` or `DFD+SFD`; repeatable.
        /// Without it the configured variants (default: all seven) are run.
        #[arg(long)]
        branches: Vec<String>,
        /// Feature directory for imported-features variants.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Write the table as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint's encoder over every window of a split and save the features.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    OtherVideos,
    OtherFrames,
}

/// Parses `args` and runs the command. Returns the process exit status:
/// 0 on success, 1 on validation or runtime failure, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(p), _) => AppConfig::from_file(p)?,
        (None, Some(Preset::Desk)) => AppConfig::desk_scale(),
        (None, _) => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn data_root(arg: &Option<PathBuf>, cfg: &AppConfig) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| cfg.data_root())
        .ok_or_else(|| Error::Config(format!("no dataset given: pass --data, set [data] root or {DATA_ROOT_ENV}")))
}

/// Uses the dataset's recorded pixel statistics unless the configuration
/// sets its own.
fn adopt_standardization(cfg: &mut AppConfig, root: &Path) -> Result<()> {
    let identity = data::Standardization::identity();
    if cfg.encoder.pixel_mean == identity.mean && cfg.encoder.pixel_std == identity.std {
        if let Some(meta) = SynthMeta::read(root)? {
            cfg.encoder.pixel_mean = meta.standardization.mean;
            cfg.encoder.pixel_std = meta.standardization.std;
            log::info!("using dataset pixel statistics {:?}", meta.standardization);
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<i32> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { videos, val_videos, frames, resolution, fixations, out } => {
            let spec = SynthSpec { videos, val_videos, frames, resolution, seed: cli.seed.unwrap_or(7), fixations_per_frame: fixations };
            data::synth_dataset(&spec, &out)?;
            println!("wrote {} videos to {}", videos + val_videos, out.display());
            Ok(0)
        }
        Command::Train { data, out, steps, lr, freeze_encoder, features } => {
            let root = data_root(&data, &cfg)?;
            if let Some(s) = steps {
                cfg.train.max_steps = s;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            cfg.train.freeze_encoder |= freeze_encoder;
            cfg.train.dump_dir.get_or_insert_with(|| out.clone());
            adopt_standardization(&mut cfg, &root)?;
            cfg.validate()?;
            let size = cfg.model().input_hw();
            let train_videos = load_videos(&index_dataset(&root, Split::Train)?, size)?;
            let val_videos = match index_dataset(&root, Split::Val) {
                Ok(idx) => load_videos(&idx, size)?,
                Err(Error::Io { .. }) => {
                    log::warn!("no validation split; keeping the final parameters");
                    Vec::new()
                }
                Err(e) => return Err(e),
            };
            let source = features.map_or(FeatureSource::Encoder, FeatureSource::Imported);
            let model = SalFoM::new(&cfg.model(), cfg.train.seed)?;
            let log = pipeline::train(&model, &train_videos, &val_videos, &cfg.train, &source)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            model.save(out.join("model.ckpt"))?;
            log.write_jsonl(&out.join("train_log.jsonl"))?;
            println!(
                "trained {} steps (best step {}{}); checkpoint {}",
                log.steps.len(),
                log.best_step,
                if log.stopped_early { ", stopped early" } else { "" },
                out.join("model.ckpt").display()
            );
            Ok(0)
        }
        Command::Predict { checkpoint, data, split, out, overlays } => {
            let root = data_root(&data, &cfg)?;
            let split: Split = split.parse()?;
            let model = SalFoM::load(&checkpoint)?;
            let index = index_dataset(&root, split)?;
            for entry in &index.videos {
                let video = Video::load(&data::VideoEntry { maps: vec![], fixations: vec![], ..entry.clone() }, model.config().input_hw())?;
                let maps = pipeline::sliding_window_predict(&model, &video)?;
                for (k, map) in maps.iter().enumerate() {
                    let frame = read_rgb(&entry.frames[k])?;
                    let (w, h) = frame.dimensions();
                    let m = resample::resize_map(&map.to_array()?, h as usize, w as usize);
                    let name = data::frame_file_name(k + 1);
                    data::write_map_png(&out.join(&entry.id).join(&name), &m)?;
                    if let Some(dir) = &overlays {
                        let p = dir.join(&entry.id).join(&name);
                        let img = overlay_image(&frame, &m);
                        fs::create_dir_all(p.parent().unwrap()).map_err(|e| Error::io(&p, e))?;
                        img.save(&p).map_err(|source| Error::Image { path: p.clone(), source })?;
                    }
                }
                println!("{}: {} maps", entry.id, maps.len());
            }
            Ok(0)
        }
        Command::Evaluate { pred, data, split, report, splits, pool } => {
            let root = data_root(&data, &cfg)?;
            let index = index_dataset(&root, split.parse()?)?;
            let pool = match pool {
                PoolArg::OtherVideos => PoolSpec::OtherVideos,
                PoolArg::OtherFrames => PoolSpec::OtherFrames,
            };
            let opts = EvalOptions { pool, n_splits: splits, seed: cfg.train.seed };
            let r = evaluate_directory(&pred, &index, &opts)?;
            if let Some(dir) = report {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                r.write_jsonl(&dir.join("report.jsonl"))?;
                r.write_csv(&dir.join("report.csv"))?;
            }
            print!("{}", r.summary_table());
            if r.is_clean() {
                Ok(0)
            } else {
                eprintln!("error: {}", Error::Itemized(r.issues.clone()));
                Ok(1)
            }
        }
        Command::Ablate { data, branches, features, out } => {
            let root = data_root(&data, &cfg)?;
            adopt_standardization(&mut cfg, &root)?;
            cfg.validate()?;
            let specs: Vec<AblationSpec> = if !branches.is_empty() {
                branches.iter().map(|b| Ok(AblationSpec::branches(b.parse::<BranchSet>()?))).collect::<Result<_>>()?
            } else if !cfg.ablation.variants.is_empty() {
                cfg.ablation.variants.clone()
            } else {
                AblationSpec::decoder_matrix()
            };
            let size = cfg.model().input_hw();
            let train_videos = load_videos(&index_dataset(&root, Split::Train)?, size)?;
            let val_videos = load_videos(&index_dataset(&root, Split::Val)?, size)?;
            let opts = AblationOptions { features_root: features, eval_stride: cfg.train.val_stride, eval: EvalOptions { seed: cfg.train.seed, ..Default::default() } };
            let table = pipeline::run_ablation(&specs, &cfg, &train_videos, &val_videos, &opts);
            print!("{table}");
            if let Some(p) = out {
                let text = serde_json::to_string_pretty(&table).map_err(|e| Error::format(&p, e.to_string()))?;
                fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            }
            Ok(if table.failed().next().is_some() { 1 } else { 0 })
        }
        Command::ExportFeatures { checkpoint, data, split, out } => {
            let root = data_root(&data, &cfg)?;
            let split: Split = split.parse()?;
            let model = SalFoM::load(&checkpoint)?;
            let window = model.config().encoder.window_frames;
            let index = index_dataset(&root, split)?;
            for entry in &index.videos {
                let video = Video::load(&data::VideoEntry { maps: vec![], fixations: vec![], ..entry.clone() }, model.config().input_hw())?;
                for end in 0..video.len() {
                    let f = model.encode(&video.clip(end, window)?)?;
                    let p = feature_path(&out, split, &video.id, end);
                    fs::create_dir_all(p.parent().unwrap()).map_err(|e| Error::io(&p, e))?;
                    export_features(&f, &p)?;
                }
                println!("{}: {} windows", entry.id, video.len());
            }
            Ok(0)
        }
    }
}

/// Frame on the left; on the right the frame darkened and tinted red by the map.
fn overlay_image(frame: &RgbImage, map: &ndarray::Array2<f64>) -> RgbImage {
    let (w, h) = frame.dimensions();
    let (lo, hi) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(2 * w, h, |x, y| {
        if x < w {
            return *frame.get_pixel(x, y);
        }
        let p = frame.get_pixel(x - w, y).0;
        let s = (map[[y as usize, (x - w) as usize]] - lo) / range;
        let mix = |c: u8, tint: f64| ((c as f64 * 0.5 * (1.0 - s) + tint * s).round().clamp(0.0, 255.0)) as u8;
        image::Rgb([mix(p[0], 255.0), mix(p[1], 0.0), mix(p[2], 0.0)])
    })
}
