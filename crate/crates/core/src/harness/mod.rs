//! Experiment pipeline: data, training, pruning under any criterion, bound
//! measurements, retraining to recovery, and the curve / trace / replay
//! reports built on top of it.

pub mod config;
mod curve;
mod replay;
mod report;

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{
    CurveConfig, DataConfig, DataSource, ExperimentConfig, LayerSpec, ModelConfig, OutputConfig, PrunePlan,
    RetrainConfig, StageSpec, SyntheticConfig,
};
pub use curve::{run_curve, run_retrain_trace, write_curve_csv, write_trace_csv, CurvePoint, TracePoint};
pub use replay::{replay, replay_files};
pub use report::{LayerCount, RunReport, StageSummary};

use crate::baselines::{prune_exact, Criterion};
use crate::bounds::BoundReport;
use crate::error::{LobsError, Result};
use crate::hessian::accumulate_psi;
use crate::io::{self, HessianDump, HessianEntry};
use crate::net::{capture_snapshots_with, load_mnist, Dataset, Network, SnapshotOptions, Split, TrainConfig, Trainer};
use crate::pruner::{iterative_lobs, prune_network, DecisionLog, PruneOptions, PruneTarget, StagePlan};

/// Train, test and probe sets of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
    pub probe: Dataset,
}

pub fn load_data(cfg: &DataConfig) -> Result<ExperimentData> {
    let (train, test) = match cfg.source {
        DataSource::Mnist => {
            let m = load_mnist(&cfg.dir)?;
            (m.train, m.test)
        }
        DataSource::Synthetic => synthetic(&cfg.synthetic)?,
    };
    let train = cfg.train_limit.map_or(train.clone(), |n| train.head(n));
    let test = cfg.test_limit.map_or(test.clone(), |n| test.head(n));
    let probe = train.probe(cfg.probe_size, cfg.probe_seed);
    Ok(ExperimentData { train, test, probe })
}

/// Noisy class clusters around random centres in `[-1, 1]^dim`.
pub fn synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    if cfg.dim == 0 || cfg.classes < 2 {
        return Err(LobsError::Config("synthetic data needs dim >= 1 and classes >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centres: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut draw = |n: usize, split: Split| {
        let mut x = Array2::zeros((cfg.dim, n));
        let mut labels = Vec::with_capacity(n);
        for j in 0..n {
            let c = j % cfg.classes;
            for i in 0..cfg.dim {
                let noise: f64 = (0..3).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() / 3.0;
                x[[i, j]] = centres[c][i] + cfg.spread * noise;
            }
            labels.push(c);
        }
        Dataset::new(x, labels, cfg.classes, split)
    };
    let train = draw(cfg.train, Split::Train)?;
    let test = draw(cfg.test, Split::Test)?;
    Ok((train, test))
}

/// The checkpoint named in the config, or a freshly trained model.
pub fn obtain_model(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Network> {
    if let Some(path) = &cfg.model.checkpoint {
        return io::load_network(path);
    }
    let net = cfg.model.build()?;
    Ok(crate::net::train_sgd(&net, &data.train, &cfg.train)?.net)
}

/// Test-error trace of a retraining run.
#[derive(Clone, Debug)]
pub struct Retrained {
    pub net: Network,
    /// `(iteration, test error)`, starting at iteration 0.
    pub points: Vec<(usize, f64)>,
    pub recovered_at: Option<usize>,
    pub iterations: usize,
    pub final_error: f64,
}

/// Masked SGD from `net`, measuring test error every `eval_every` steps.
///
/// Recovery is the first measured iteration whose error is at most `target`.
pub fn retrain_to_recovery(
    net: &Network,
    data: &ExperimentData,
    train: &TrainConfig,
    eval_every: usize,
    target: f64,
    stop_at_recovery: bool,
) -> Result<Retrained> {
    let mut error = net.error_rate(&data.test)?;
    let mut points = vec![(0, error)];
    let mut recovered_at = (error <= target).then_some(0);
    if train.iterations == 0 || (stop_at_recovery && recovered_at.is_some()) {
        return Ok(Retrained {
            net: net.clone(),
            points,
            recovered_at,
            iterations: 0,
            final_error: error,
        });
    }
    let mut trainer = Trainer::new(net.clone(), train.clone())?;
    while trainer.iteration() < train.iterations {
        trainer.step(&data.train)?;
        let it = trainer.iteration();
        if it % eval_every == 0 || it == train.iterations {
            error = trainer.net().error_rate(&data.test)?;
            points.push((it, error));
            if recovered_at.is_none() && error <= target {
                recovered_at = Some(it);
                if stop_at_recovery {
                    break;
                }
            }
        }
    }
    let iterations = trainer.iteration();
    Ok(Retrained {
        net: trainer.into_net(),
        points,
        recovered_at,
        iterations,
        final_error: error,
    })
}

/// Result of pruning (before retraining).
#[derive(Clone, Debug)]
pub struct Pruned {
    pub net: Network,
    pub log: DecisionLog,
    /// `Ψ` and `Ψ^{-1}` per L-OBS layer; empty for baselines.
    pub hessian: HessianDump,
    pub warnings: Vec<String>,
    pub stages: Vec<StageSummary>,
}

fn prune_options(plan: &PrunePlan) -> PruneOptions {
    PruneOptions {
        alpha: plan.alpha,
        batch_size_per_recompute: plan.batch_size_per_recompute,
        snapshot: SnapshotOptions {
            conv_positions: plan.conv_positions,
            seed: plan.seed,
        },
    }
}

/// Single-stage pruning of `original` under the configured criterion.
pub fn prune_single_stage(cfg: &ExperimentConfig, original: &Network, data: &ExperimentData) -> Result<Pruned> {
    let criterion = cfg.prune.criterion()?;
    let targets = cfg.prune.targets(original.num_layers())?;
    let options = prune_options(&cfg.prune);
    let base_hash = io::network_sha256(original);
    if criterion.compensates() {
        let (net, outcomes, inverses) = prune_network(original, &data.probe, &targets, &options)?;
        let snapshots = capture_snapshots_with(original, &data.probe, &options.snapshot)?;
        let mut entries = Vec::with_capacity(inverses.len());
        for inv in inverses {
            let psi = accumulate_psi(&snapshots[inv.layer_index])?;
            entries.push(HessianEntry { psi, inverse: inv });
        }
        let warnings = outcomes.iter().flat_map(|o| o.warnings.clone()).collect();
        let records = outcomes.into_iter().flat_map(|o| o.decisions).collect();
        return Ok(Pruned {
            log: DecisionLog::new(base_hash, original, records),
            net,
            hessian: HessianDump { entries },
            warnings,
            stages: Vec::new(),
        });
    }
    let snapshots = capture_snapshots_with(original, &data.probe, &options.snapshot)?;
    let mut net = original.clone();
    let mut records = Vec::new();
    for (l, target) in targets {
        let layer = net.layer(l);
        let count = match target {
            PruneTarget::CompressionRatio(c) => layer
                .active_count()
                .saturating_sub((c * layer.param_count() as f64).round() as usize),
            PruneTarget::Count(k) => k,
            PruneTarget::Threshold(_) => {
                return Err(LobsError::Config(format!(
                    "threshold targets need the lobs criterion, not {criterion}"
                )))
            }
        };
        records.extend(prune_exact(&mut net, l, criterion, count, &snapshots[l], None)?);
    }
    Ok(Pruned {
        log: DecisionLog::new(base_hash, original, records),
        net,
        hessian: HessianDump::default(),
        warnings: Vec::new(),
        stages: Vec::new(),
    })
}

/// Everything produced by one run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub original: Network,
    pub pruned: Pruned,
    pub retrained: Retrained,
}

struct Clock(Vec<(String, f64)>, Instant);

impl Clock {
    fn new() -> Self {
        Clock(Vec::new(), Instant::now())
    }

    fn lap(&mut self, phase: &str) {
        self.0.push((phase.to_string(), self.1.elapsed().as_secs_f64()));
        self.1 = Instant::now();
    }
}

/// Prunes, measures and retrains a given model, writing artifacts to `out` if set.
pub fn run_from_model(
    cfg: &ExperimentConfig,
    original: &Network,
    data: &ExperimentData,
    out: Option<&Path>,
) -> Result<RunOutcome> {
    let mut clock = Clock::new();
    let criterion = cfg.prune.criterion().map_err(|e| e.in_phase("prune"))?;
    let original_error = original.error_rate(&data.test).map_err(|e| e.in_phase("evaluate"))?;
    clock.lap("evaluate");

    let pruned = if cfg.prune.stages.is_empty() {
        prune_single_stage(cfg, original, data)
    } else {
        prune_iterative(cfg, original, data)
    }
    .map_err(|e| e.in_phase("prune"))?;
    clock.lap("prune");
    if let Some(dir) = out {
        save_pruned(dir, &pruned).map_err(|e| e.in_phase("prune"))?;
    }
    let error_after_pruning = match pruned.stages.first() {
        Some(s) => s.error_after_pruning,
        None => pruned.net.error_rate(&data.test).map_err(|e| e.in_phase("prune"))?,
    };

    let bounds = BoundReport::measure(original, &pruned.net, data.probe.inputs()).map_err(|e| e.in_phase("bounds"))?;
    clock.lap("bounds");
    if let Some(dir) = out {
        bounds.save_csv(&dir.join("bounds.csv")).map_err(|e| e.in_phase("bounds"))?;
    }

    let target = cfg.retrain.target(original_error);
    let retrained = if pruned.stages.is_empty() {
        let train = cfg.retrain.train_config(&cfg.train, criterion);
        retrain_to_recovery(
            &pruned.net,
            data,
            &train,
            cfg.retrain.eval_every,
            target,
            cfg.retrain.stop_at_recovery,
        )
        .map_err(|e| e.in_phase("retrain"))?
    } else {
        let error = pruned.net.error_rate(&data.test).map_err(|e| e.in_phase("retrain"))?;
        let iterations = pruned.stages.iter().map(|s| s.retrain_iterations).sum();
        Retrained {
            net: pruned.net.clone(),
            points: vec![(iterations, error)],
            recovered_at: (error <= target).then_some(iterations),
            iterations,
            final_error: error,
        }
    };
    clock.lap("retrain");

    let report = RunReport::new(
        criterion,
        original,
        &pruned,
        original_error,
        error_after_pruning,
        &retrained,
        target,
        bounds,
        clock.0,
    );
    if let Some(dir) = out {
        (|| -> Result<()> {
            io::save_network(&retrained.net, &dir.join("retrained.lobs"))?;
            write_file(&dir.join("report.txt"), report.to_text().as_bytes())?;
            let mut csv = Vec::new();
            report.write_csv(&mut csv)?;
            write_file(&dir.join("report.csv"), &csv)
        })()
        .map_err(|e| e.in_phase("report"))?;
    }
    Ok(RunOutcome {
        report,
        original: original.clone(),
        pruned,
        retrained,
    })
}

fn prune_iterative(cfg: &ExperimentConfig, original: &Network, data: &ExperimentData) -> Result<Pruned> {
    if !cfg.prune.criterion()?.compensates() {
        return Err(LobsError::Config("iterative stages need the lobs criterion".into()));
    }
    let schedule = cfg.prune.schedule(original.num_layers());
    let plans: Vec<StagePlan> = cfg
        .prune
        .stages
        .iter()
        .map(|s| StagePlan {
            targets: schedule
                .iter()
                .zip(&s.layer_ratios)
                .map(|(&l, &c)| (l, PruneTarget::CompressionRatio(c)))
                .collect(),
            retrain: TrainConfig {
                iterations: s.retrain_iterations,
                ..cfg.retrain.train_config(&cfg.train, Criterion::Lobs)
            },
        })
        .collect();
    let outcome = iterative_lobs(original, &data.train, &data.test, &data.probe, &plans, &prune_options(&cfg.prune))?;
    let stages = outcome.stages.iter().map(StageSummary::from).collect();
    let records = outcome
        .stages
        .into_iter()
        .flat_map(|s| s.layers.into_iter().flat_map(|o| o.decisions))
        .collect();
    Ok(Pruned {
        log: DecisionLog::new(io::network_sha256(original), original, records),
        net: outcome.net,
        hessian: HessianDump::default(),
        warnings: Vec::new(),
        stages,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| LobsError::io(path, e))
}

fn save_pruned(dir: &Path, pruned: &Pruned) -> Result<()> {
    io::save_network(&pruned.net, &dir.join("pruned.lobs"))?;
    pruned.log.save(&dir.join("decisions.csv"))?;
    if !pruned.hessian.entries.is_empty() {
        io::save_hessian(&pruned.hessian, &dir.join("hessian.lobs"))?;
    }
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LobsError::io(dir, e))
}

/// Loads data and the model (training it if needed), saving `model.lobs` under `out`.
pub fn prepare(cfg: &ExperimentConfig, out: &Path) -> Result<(ExperimentData, Network)> {
    ensure_dir(out)?;
    let data = load_data(&cfg.data).map_err(|e| e.in_phase("data"))?;
    let net = obtain_model(cfg, &data).map_err(|e| e.in_phase("train"))?;
    io::save_network(&net, &out.join("model.lobs")).map_err(|e| e.in_phase("train"))?;
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok((data, net))
}

/// The full pipeline with artifacts under `cfg.output.dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let out = cfg.output.dir.clone();
    let start = Instant::now();
    let (data, net) = prepare(cfg, &out)?;
    let prep = start.elapsed().as_secs_f64();
    let mut outcome = run_from_model(cfg, &net, &data, Some(&out))?;
    outcome.report.timings.insert(0, ("data+train".into(), prep));
    Ok(outcome.report)
}
