use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cinet::attention::AttentionKind;
use cinet::config::TrainConfig;
use cinet::data::{load_dataset, load_image, load_mask, save_gray, save_mask, synth_generate, SynthSpec};
use cinet::gradsuite;
use cinet::labels::edge_band;
use cinet::loss::SupervisionMode;
use cinet::resample::{roundtrip_distortion, ResizeSpec};
use cinet::train::{sidecar_config, train_to_dir, AnyModel, LOG_HEADER};

/// File the `train` command writes its training-set evaluation to.
const TRAIN_REPORT_FILE: &str = "report.txt";

#[derive(Parser)]
#[command(name = "cinet", version, about = "Salient object detection with a cascaded interaction network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image/mask dataset.
    Synth {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, config, per-epoch log and a
    /// training-set evaluation report to the output directory.
    Train {
        /// `key = value` config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cascade_depth: Option<usize>,
        #[arg(long)]
        attention: Option<AttentionKind>,
        #[arg(long)]
        supervision: Option<SupervisionMode>,
        #[arg(long)]
        erosion_radius: Option<usize>,
        /// Extra `key=value` overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Defaults to `config.txt` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write an 8-bit saliency map for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Split a mask into its boundary band and kept set.
    Erode {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        radius: usize,
        #[arg(long)]
        out_band: PathBuf,
        #[arg(long)]
        out_keep: PathBuf,
    },
    /// Mean absolute error of resizing an image down to HxW and back.
    Distortion {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        down: Vec<usize>,
    },
    /// Check every backward pass against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = gradsuite::SEEDS)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { count, size, seed, out } => {
            let spec = SynthSpec {
                count,
                size,
                seed,
                ..Default::default()
            };
            let n = synth_generate(&spec, &out)?;
            println!("wrote {n} pairs to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            cascade_depth,
            attention,
            supervision,
            erosion_radius,
            overrides,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(q) = cascade_depth {
                cfg.model.cascade_depth = q;
            }
            if let Some(a) = attention {
                cfg.model.attention = a;
            }
            if let Some(s) = supervision {
                cfg.supervision.mode = s;
            }
            if let Some(r) = erosion_radius {
                cfg.supervision.erosion_radius = r;
            }
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .with_context(|| format!("override {kv:?} is not key=value"))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            let pairs = load_dataset(&data)?;
            println!("{LOG_HEADER}");
            let (model, _) = train_to_dir(&cfg, &pairs, &out, |e| println!("{}", e.csv_row()))?;
            let report = model.evaluate(&pairs)?;
            let path = out.join(TRAIN_REPORT_FILE);
            report.write(&path)?;
            print!("{}", report.to_text());
        }
        Command::Eval {
            checkpoint,
            data,
            report,
            config,
        } => {
            let model = load_model(&checkpoint, config.as_deref())?;
            let pairs = load_dataset(&data)?;
            let r = model.evaluate(&pairs)?;
            r.write(&report)?;
            print!("{}", r.to_text());
        }
        Command::Predict {
            checkpoint,
            image,
            out,
            config,
        } => {
            let model = load_model(&checkpoint, config.as_deref())?;
            let img = load_image(&image)?;
            let map = model.predict(&[&img])?.remove(0);
            save_gray(&out, map.height(), map.width(), &map.quantize())?;
        }
        Command::Erode {
            mask,
            radius,
            out_band,
            out_keep,
        } => {
            let m = load_mask(&mask)?;
            let part = edge_band(&m, radius);
            save_mask(&out_band, &part.band)?;
            save_mask(&out_keep, &part.keep())?;
            println!("band = {}\nkeep = {}", part.band_len(), part.keep_len());
        }
        Command::Distortion { image, down } => {
            let [h, w] = down[..] else { bail!("--down takes H W") };
            let img = load_image(&image)?;
            println!("{:.9}", roundtrip_distortion(&img, ResizeSpec::new(h, w)?)?);
        }
        Command::Gradcheck { seeds } => {
            if seeds == 0 {
                bail!("--seeds must be positive");
            }
            let report = gradsuite::run(seeds)?;
            print!("{}", report.to_text());
            println!("max_rel_err = {:.3e} (tolerance {:.0e})", report.max_rel_err(), gradsuite::TOLERANCE);
            if !report.passes() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<AnyModel> {
    let cfg_path = config.map(Path::to_path_buf).unwrap_or_else(|| sidecar_config(checkpoint));
    let cfg = TrainConfig::load(&cfg_path).with_context(|| format!("reading model config {}", cfg_path.display()))?;
    Ok(AnyModel::load(&cfg, checkpoint)?)
}
