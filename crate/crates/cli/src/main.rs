use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ucad::encoder::{Encoder, Image};
use ucad::harness::{self, HeatmapSidecar, StreamConfig};
use ucad::inference::{infer, InferConfig};
use ucad::memory::{load_for_encoder, persist};
use ucad::pgm::Pgm;

#[derive(Parser)]
#[command(name = "ucad", version, about = "Continual unsupervised anomaly detection on synthetic texture streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task stream and write it as PGM images plus a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the continual protocol; write the memory file and the report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write final-stage heatmaps into this directory.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
    },
    /// Evaluate a memory file on a generated dataset directory.
    Eval {
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Score one PGM image and write its anomaly heatmap.
    Infer {
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stream config naming the encoder the memory was built with.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn read_config(path: Option<&Path>) -> Result<StreamConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => StreamConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("UCAD_THREADS") {
        let n: usize = v.parse().with_context(|| format!("UCAD_THREADS={v:?} is not a count"))?;
        if n == 0 {
            bail!("UCAD_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    configure_threads()?;
    match Cli::parse().command {
        Command::GenData { config, out } => {
            let cfg = read_config(config.as_deref())?;
            let stream = harness::gen_stream(&cfg)?;
            fs::create_dir_all(&out)?;
            harness::save_stream(&cfg, &stream, &out)?;
            let images: usize = stream.tasks.iter().map(|t| t.train.len() + t.test.len()).sum();
            eprintln!("wrote {} tasks, {images} images to {}", stream.tasks.len(), out.display());
        }
        Command::Train {
            config,
            out,
            report,
            heatmaps,
        } => {
            let cfg = read_config(config.as_deref())?;
            let run = harness::run_continual(&cfg)?;
            persist(&run.memory, &out).with_context(|| format!("writing {}", out.display()))?;
            write_json(&report, &run.report)?;
            if let Some(dir) = heatmaps {
                harness::emit(&run, &dir)?;
            }
            let r = &run.report;
            eprintln!(
                "image AUROC {:.4}  pixel AUPR {:.4}  selection {:.4}  FM {:?}  ({:.1}s)",
                r.average_image_auroc, r.average_pixel_aupr, r.selection_accuracy, r.fm_image_auroc, r.wall_clock_seconds
            );
        }
        Command::Eval { memory, data, report } => {
            let (cfg, stream) = harness::load_stream(&data)?;
            let encoder = Encoder::new(cfg.encoder.clone())?;
            let mem = load_for_encoder(&memory, &encoder)?;
            let infer_cfg = InferConfig {
                neighbours: cfg.neighbours,
                sigma: cfg.sigma,
            };
            let eval = harness::evaluate_stream(&encoder, &mem, &stream, &infer_cfg)?;
            write_json(&report, &eval)?;
            eprintln!(
                "image AUROC {:.4}  pixel AUPR {:.4}  selection {:.4}",
                eval.average_image_auroc, eval.average_pixel_aupr, eval.selection_accuracy
            );
        }
        Command::Infer {
            memory,
            image,
            out,
            config,
        } => {
            let cfg = read_config(config.as_deref())?;
            let encoder = Encoder::new(cfg.encoder.clone())?;
            let mem = load_for_encoder(&memory, &encoder)?;
            let pgm = Pgm::read(&image).with_context(|| format!("reading {}", image.display()))?;
            let img = Image::new(pgm.height, pgm.width, 1, pgm.to_unit())?;
            let infer_cfg = InferConfig {
                neighbours: cfg.neighbours,
                sigma: cfg.sigma,
            };
            let result = infer(&img, &encoder, &mem, &infer_cfg)?;
            let (_, range) = result.heatmap();
            let sidecar = HeatmapSidecar {
                task: None,
                index: None,
                anomalous: None,
                selected_task: result.selected_task,
                image_score: result.image_score,
                min: range.min,
                max: range.max,
            };
            harness::write_heatmap(&result, &out, &sidecar)?;
            println!(
                "{}",
                serde_json::json!({
                    "selected_task": result.selected_task,
                    "image_score": result.image_score,
                    "heatmap": out,
                })
            );
        }
    }
    Ok(())
}
