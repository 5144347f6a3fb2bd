use std::io::Write;

use super::{prune_single_stage, retrain_to_recovery, ExperimentConfig, ExperimentData};
use crate::baselines::{prune_by_criterion, Criterion};
use crate::error::{LobsError, Result};
use crate::hessian::recursive_psi_inverse;
use crate::net::{capture_snapshots_with, Network, SnapshotOptions};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub criterion: String,
    /// Pruned / original parameters of the curve layer; 0 for the unpruned row.
    pub ratio: f64,
    pub accuracy: f64,
}

/// Test accuracy after pruning only `cfg.curve.layer` to each ratio, no retraining.
///
/// The first row is the unpruned network, tagged `original`.
pub fn run_curve(cfg: &ExperimentConfig, original: &Network, data: &ExperimentData) -> Result<Vec<CurvePoint>> {
    let layer = cfg.curve.layer;
    if layer >= original.num_layers() {
        return Err(LobsError::Config(format!("curve.layer {layer} does not exist")));
    }
    let opts = SnapshotOptions {
        conv_positions: cfg.prune.conv_positions,
        seed: cfg.prune.seed,
    };
    let snapshots = capture_snapshots_with(original, &data.probe, &opts)?;
    let snap = &snapshots[layer];
    let criteria = cfg
        .curve
        .criteria
        .iter()
        .map(|c| Criterion::parse(c, cfg.prune.seed))
        .collect::<Result<Vec<_>>>()?;
    let pinv = if criteria.iter().any(Criterion::compensates) {
        Some(recursive_psi_inverse(snap, cfg.prune.alpha)?)
    } else {
        None
    };
    let mut points = vec![CurvePoint {
        criterion: "original".into(),
        ratio: 0.0,
        accuracy: original.accuracy(&data.test)?,
    }];
    for c in criteria {
        let accs = par::map_slice(&cfg.curve.ratios, |&ratio| -> Result<f64> {
            let mut net = original.clone();
            prune_by_criterion(&mut net, layer, c, ratio, snap, pinv.as_ref())?;
            net.accuracy(&data.test)
        });
        for (&ratio, acc) in cfg.curve.ratios.iter().zip(accs) {
            points.push(CurvePoint {
                criterion: c.name().into(),
                ratio,
                accuracy: acc?,
            });
        }
    }
    Ok(points)
}

pub fn write_curve_csv(points: &[CurvePoint], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["criterion", "ratio", "accuracy"])?;
    for p in points {
        w.write_record([p.criterion.clone(), p.ratio.to_string(), p.accuracy.to_string()])?;
    }
    w.flush().map_err(|e| LobsError::io("<curve>", e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub criterion: String,
    pub iteration: usize,
    pub test_error: f64,
}

/// Retraining traces of L-OBS and magnitude pruning at the configured ratios.
///
/// Both run the full `retrain.iterations`; iteration 0 is the post-prune error.
pub fn run_retrain_trace(cfg: &ExperimentConfig, original: &Network, data: &ExperimentData) -> Result<Vec<TracePoint>> {
    let mut points = Vec::new();
    for criterion in [Criterion::Lobs, Criterion::Magnitude] {
        let mut c = cfg.clone();
        c.prune.criterion = criterion.name().into();
        let pruned = prune_single_stage(&c, original, data)?;
        let train = c.retrain.train_config(&c.train, criterion);
        let r = retrain_to_recovery(&pruned.net, data, &train, c.retrain.eval_every, f64::NEG_INFINITY, false)?;
        points.extend(r.points.into_iter().map(|(iteration, test_error)| TracePoint {
            criterion: criterion.name().into(),
            iteration,
            test_error,
        }));
    }
    Ok(points)
}

pub fn write_trace_csv(points: &[TracePoint], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["criterion", "iteration", "test_error"])?;
    for p in points {
        w.write_record([p.criterion.clone(), p.iteration.to_string(), p.test_error.to_string()])?;
    }
    w.flush().map_err(|e| LobsError::io("<trace>", e))
}
