use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use msqm::bench::{alloc_stats, sweep_token_keep, write_sweep_csv, write_sweep_svg, SweepSettings};
use msqm::config::TrainConfig;
use msqm::data::{generate_clip, load_dataset, save_clip};
use msqm::model::{DecodeMode, Model};
use msqm::train::{evaluate, train};
use msqm::verify::gradcheck_report;

#[global_allocator]
static ALLOCATOR: alloc_stats::CountingAllocator = alloc_stats::CountingAllocator;

/// Multi-stage multiscale query-memory transformer for video class-agnostic
/// segmentation.
#[derive(Parser)]
#[command(name = "msqm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Plain-text config of `key = value` lines; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonOpts {
    fn load(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the synthetic moving-shapes set (or a dataset root).
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Output directory for metrics.csv and model.ckpt.
        #[arg(long)]
        out: PathBuf,
        /// Decoder variant.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<DecodeMode>,
    },
    /// Evaluate a checkpoint over a dataset directory.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split directory (`<dir>/<clip_id>/frames|masks/...`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<DecodeMode>,
        /// Token keep ratio at inference.
        #[arg(long)]
        keep_ratio: Option<f32>,
    },
    /// Sweep the token keep ratio, recording peak memory, latency and mIoU.
    BenchSweep {
        #[command(flatten)]
        common: CommonOpts,
        /// Trained checkpoint for a meaningful mIoU column; without it the
        /// sweep runs a freshly initialized model (cost columns only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated keep ratios.
        #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
        r_values: String,
    },
    /// Verify every primitive and the composed model against the
    /// finite-difference oracle.
    Gradcheck {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Generate a synthetic dataset to `<out>/train` and `<out>/val`.
    SynthGen {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<DecodeMode, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { common, out, mode } => {
            let mut cfg = common.load()?;
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            let report = train(&cfg, &out)?;
            for e in &report.epochs {
                println!(
                    "epoch {:3}  loss {:.6}  val_miou {:.6}",
                    e.epoch, e.loss, e.val_miou
                );
            }
            println!(
                "best epoch {} (val mIoU {:.4}); wrote {} and {}",
                report.best_epoch,
                report.best_miou,
                report.metrics_csv.display(),
                report.checkpoint.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval {
            common,
            checkpoint,
            data,
            out,
            mode,
            keep_ratio,
        } => {
            let mut cfg = common.load()?;
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            if let Some(r) = keep_ratio {
                cfg.keep_ratio = r;
            }
            let mut model = Model::new(cfg.model_config(), cfg.seed)?;
            msqm::checkpoint::load_into(&mut model.store, &checkpoint)?;
            let clips = load_dataset(&data)?.load_all()?;
            if clips.is_empty() {
                bail!("no clips under {}", data.display());
            }
            let report = evaluate(&model, &clips, cfg.seed, &out)?;
            println!("{:24} {:>8} {:>8}", "clip", "mIoU", "J");
            for row in &report.rows {
                println!("{:24} {:8.4} {:8.4}", row.clip_id, row.miou, row.j);
            }
            println!(
                "{:24} {:8.4} {:8.4}",
                "mean", report.mean_miou, report.mean_j
            );
            println!("wrote {}", out.join("eval.csv").display());
            Ok(ExitCode::SUCCESS)
        }

        Command::BenchSweep {
            common,
            checkpoint,
            out,
            r_values,
        } => {
            let cfg = common.load()?;
            let r_values = parse_r_values(&r_values)?;
            let mut model = Model::new(cfg.model_config(), cfg.seed)?;
            match &checkpoint {
                Some(path) => msqm::checkpoint::load_into(&mut model.store, path)?,
                None => eprintln!(
                    "note: no --checkpoint, sweeping an untrained model (mIoU column is not meaningful)"
                ),
            }
            let (_, val) = msqm::train::prepare_data(&cfg)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let records = sweep_token_keep(
                &mut model,
                &val,
                &r_values,
                SweepSettings::default(),
                cfg.seed,
            )?;
            println!(
                "{:>5} {:>14} {:>14} {:>8}",
                "r", "peak_bytes", "ms_per_frame", "miou"
            );
            for rec in &records {
                println!(
                    "{:5.2} {:14} {:14.3} {:8.4}",
                    rec.r, rec.peak_bytes, rec.ms_per_frame, rec.miou
                );
            }
            write_sweep_csv(&records, &out.join("sweep.csv"))?;
            write_sweep_svg(&records, &out.join("sweep.svg"))?;
            println!(
                "wrote {} and {}",
                out.join("sweep.csv").display(),
                out.join("sweep.svg").display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Gradcheck { common } => {
            let _ = common.load()?; // validates the config file if given
            let reports = gradcheck_report()?;
            let mut all_pass = true;
            for r in &reports {
                println!(
                    "{:24} max rel err {:10.3e}  {}",
                    r.name,
                    r.max_rel_err,
                    if r.pass() { "pass" } else { "FAIL" }
                );
                all_pass &= r.pass();
            }
            println!(
                "{} components, tolerance {:.0e}",
                reports.len(),
                msqm::verify::TOLERANCE
            );
            if all_pass {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient verification FAILED");
                Ok(ExitCode::FAILURE)
            }
        }

        Command::SynthGen { common, out } => {
            let cfg = common.load()?;
            for (split, count) in [("train", cfg.train_clips), ("val", cfg.val_clips)] {
                let dir = out.join(split);
                std::fs::create_dir_all(&dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
                for i in 0..count {
                    let clip = generate_clip(&cfg.synth_config(split, i))?;
                    save_clip(&clip, &dir)?;
                }
                println!("wrote {count} clips under {}", dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_r_values(s: &str) -> anyhow::Result<Vec<f32>> {
    let values: Vec<f32> = s
        .split(',')
        .map(|t| t.trim().parse::<f32>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing --r-values {s:?}"))?;
    if values.is_empty() || values.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        bail!("--r-values must be keep ratios in (0, 1]");
    }
    Ok(values)
}
