use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lobs::harness::{self, ExperimentConfig};
use lobs::{par, LobsError, Result};

/// Layer-wise second-order pruning experiments.
#[derive(Parser, Debug)]
#[command(name = "lobs", version)]
struct Cli {
    /// Worker threads for data-parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment description (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed applied to model init, training, probe sampling and pruning.
    #[arg(long)]
    seed: Option<u64>,
    /// Pruning criterion: lobs, magnitude, obd, apozw or random.
    #[arg(long)]
    criterion: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured model and save `model.lobs`.
    Train(Common),
    /// Full pipeline: train (or load `model.checkpoint`), prune, measure bounds, retrain.
    Prune(Common),
    /// Accuracy against pruning ratio of one layer for several criteria.
    Curve(Common),
    /// Test error during retraining after L-OBS and magnitude pruning.
    RetrainTrace(Common),
    /// Prune without retraining and report the error bounds.
    Bounds(Common),
    /// Re-apply a decision log to its base model.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Model the log was recorded against.
        #[arg(long)]
        model: PathBuf,
        /// Hessian dump written with the log (needed for L-OBS logs).
        #[arg(long)]
        hessian: Option<PathBuf>,
        /// Where to write the pruned model.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.reseed(seed);
    }
    if let Some(name) = &c.criterion {
        cfg.prune.criterion = name.clone();
        cfg.curve.criteria = vec![name.clone()];
    }
    if let Some(out) = &c.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    Ok((cfg, out))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| LobsError::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        par::set_threads(n);
    }
    match cli.command {
        Command::Train(c) => {
            let (cfg, out) = load_config(&c)?;
            let (data, net) = harness::prepare(&cfg, &out)?;
            println!("test error {:.4}", net.error_rate(&data.test)?);
            println!("model written to {}", out.join("model.lobs").display());
        }
        Command::Prune(c) => {
            let (cfg, out) = load_config(&c)?;
            let report = harness::run_experiment(&cfg)?;
            print!("{}", report.to_text());
            println!("artifacts in {}", out.display());
        }
        Command::Curve(c) => {
            let (cfg, out) = load_config(&c)?;
            let (data, net) = harness::prepare(&cfg, &out)?;
            let points = harness::run_curve(&cfg, &net, &data)?;
            let path = out.join("curve.csv");
            harness::write_curve_csv(&points, create(&path)?)?;
            println!("{} points written to {}", points.len(), path.display());
        }
        Command::RetrainTrace(c) => {
            let (cfg, out) = load_config(&c)?;
            let (data, net) = harness::prepare(&cfg, &out)?;
            let points = harness::run_retrain_trace(&cfg, &net, &data)?;
            let path = out.join("retrain_trace.csv");
            harness::write_trace_csv(&points, create(&path)?)?;
            println!("{} points written to {}", points.len(), path.display());
        }
        Command::Bounds(c) => {
            let (cfg, out) = load_config(&c)?;
            let (data, net) = harness::prepare(&cfg, &out)?;
            let pruned = harness::prune_single_stage(&cfg, &net, &data)?;
            let report = lobs::bounds::BoundReport::measure(&net, &pruned.net, data.probe.inputs())?;
            let path = out.join("bounds.csv");
            report.save_csv(&path)?;
            println!("{}", report.summary());
            println!("per-layer bounds written to {}", path.display());
        }
        Command::Replay {
            log,
            model,
            hessian,
            out,
        } => {
            let net = harness::replay_files(&log, &model, hessian.as_deref(), &out)?;
            println!(
                "replayed model (compression ratio {:.4}) written to {}",
                net.compression_ratio(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
