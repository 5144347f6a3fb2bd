//! Second-order layer pruning: sensitivities, optimal deletion with
//! compensation, and the threshold / ratio / count driven layer loop.

pub mod log;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bounds::snapshot_error;
use crate::error::{LobsError, Result};
use crate::hessian::{recursive_psi_inverse, PsiInverse, DEFAULT_ALPHA, HESSIAN_SCALE};
use crate::net::{
    capture_snapshots_with, train_sgd, Dataset, Layer, LayerSnapshot, Network, SnapshotOptions, TrainConfig,
};
use crate::par;

pub use log::{read_decision_log, write_decision_log, DecisionLog, DecisionRecord};

/// `[H^{-1}]_qq` below this is treated as an unobserved direction.
pub const DEGENERATE_HINV: f64 = 1e-12;

pub const DEFAULT_RECOMPUTE_BATCH: usize = 1000;

/// `L_q = ½ θ_q² / [H^{-1}]_qq` for every parameter of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityTable {
    pub layer_index: usize,
    /// Flat column-major order; `+inf` where the degenerate guard fired.
    pub scores: Vec<f64>,
    /// Already pruned (masked) entries.
    pub pruned: Vec<bool>,
}

impl SensitivityTable {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Active and not flagged by the degenerate guard.
    pub fn selectable(&self, q: usize) -> bool {
        !self.pruned[q] && self.scores[q].is_finite()
    }

    /// Lowest selectable score, ties to the lowest index.
    pub fn argmin(&self) -> Option<usize> {
        (0..self.len())
            .filter(|&q| self.selectable(q))
            .min_by(|&a, &b| cmp_score(self.scores[a], a, self.scores[b], b))
    }

    /// Up to `k` selectable indices in ascending (score, index) order.
    pub fn smallest(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).filter(|&q| self.selectable(q)).collect();
        let cmp = |a: &usize, b: &usize| cmp_score(self.scores[*a], *a, self.scores[*b], *b);
        if k < idx.len() {
            idx.select_nth_unstable_by(k, cmp);
            idx.truncate(k);
        }
        idx.sort_unstable_by(cmp);
        idx
    }
}

fn cmp_score(sa: f64, a: usize, sb: f64, b: usize) -> Ordering {
    sa.total_cmp(&sb).then(a.cmp(&b))
}

/// Change to one output unit's parameter column.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDelta {
    pub column: usize,
    /// One entry per layer row; zero on masked rows.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneDecision {
    pub layer_index: usize,
    pub q: usize,
    pub row: usize,
    pub col: usize,
    /// Value of the parameter right before deletion.
    pub theta: f64,
    pub sensitivity: f64,
    pub delta: BlockDelta,
    pub predicted_de: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PruneTarget {
    /// Stop once `sqrt(L_q) > ε` for the next candidate.
    Threshold(f64),
    /// Stop once preserved / original parameters reaches this value.
    CompressionRatio(f64),
    /// Prune exactly this many parameters (fewer if the layer runs out).
    Count(usize),
}

impl PruneTarget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PruneTarget::Threshold(eps) if eps.is_nan() || eps < 0.0 => {
                Err(LobsError::Precondition(format!("threshold must be non-negative, got {eps}")))
            }
            PruneTarget::CompressionRatio(cr) if !(cr > 0.0 && cr <= 1.0) => {
                Err(LobsError::Precondition(format!("compression ratio must lie in (0, 1], got {cr}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneConfig {
    pub target: PruneTarget,
    /// Prunes applied between sensitivity recomputations.
    pub batch_size_per_recompute: usize,
    pub alpha: f64,
}

impl PruneConfig {
    pub fn new(target: PruneTarget) -> Self {
        PruneConfig {
            target,
            batch_size_per_recompute: DEFAULT_RECOMPUTE_BATCH,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch_size_per_recompute = batch;
        self
    }

    fn validate(&self) -> Result<()> {
        self.target.validate()?;
        if self.batch_size_per_recompute == 0 {
            return Err(LobsError::Precondition("batch_size_per_recompute must be positive".into()));
        }
        Ok(())
    }
}

fn check_dims(layer: &Layer, pinv: &PsiInverse) -> Result<()> {
    if pinv.dim() != layer.rows() {
        return Err(LobsError::dim(
            pinv.layer_index,
            format!("Ψ^-1 is {0}x{0} but the layer has {1} rows", pinv.dim(), layer.rows()),
        ));
    }
    Ok(())
}

#[inline]
fn score(theta: f64, hinv_qq: f64) -> f64 {
    if hinv_qq < DEGENERATE_HINV {
        f64::INFINITY
    } else {
        0.5 * theta * theta / hinv_qq
    }
}

pub fn sensitivities(layer: &Layer, pinv: &PsiInverse) -> Result<SensitivityTable> {
    check_dims(layer, pinv)?;
    let rows = layer.rows();
    let hinv: Vec<f64> = (0..rows).map(|r| pinv.inv[[r, r]] / HESSIAN_SCALE).collect();
    let w = layer.weights();
    let mask = layer.mask();
    let per_col = par::map_indexed(layer.units(), |c| {
        (0..rows)
            .map(|r| if mask[[r, c]] { score(w[[r, c]], hinv[r]) } else { 0.0 })
            .collect::<Vec<f64>>()
    });
    let scores = per_col.concat();
    let pruned = (0..layer.param_count())
        .map(|q| !mask[[q % rows, q / rows]])
        .collect();
    Ok(SensitivityTable {
        layer_index: pinv.layer_index,
        scores,
        pruned,
    })
}

/// Deletes parameter `q` and applies the optimal compensating update within its column.
///
/// Rows already masked in that column stay exactly zero.
pub fn apply_obs_update(layer: &mut Layer, q: usize, pinv: &PsiInverse) -> Result<PruneDecision> {
    check_dims(layer, pinv)?;
    if q >= layer.param_count() {
        return Err(LobsError::IndexOutOfRange {
            index: q,
            len: layer.param_count(),
        });
    }
    let (row, col) = layer.position(q);
    if !layer.mask[[row, col]] {
        return Err(LobsError::Precondition(format!("parameter {q} is already pruned")));
    }
    let theta = layer.weights[[row, col]];
    let inv_rr = pinv.inv[[row, row]];
    let sensitivity = score(theta, inv_rr / HESSIAN_SCALE);
    // δΘ = -θ / [H^-1]_qq · H^-1 e_q; the Hessian scale cancels.
    let coef = theta / inv_rr;
    let rows = layer.rows();
    let mut values = vec![0.0; rows];
    for (i, v) in values.iter_mut().enumerate() {
        if i != row && layer.mask[[i, col]] {
            *v = -coef * pinv.inv[[i, row]];
            layer.weights[[i, col]] += *v;
        }
    }
    values[row] = -theta;
    layer.prune_entry(row, col);
    Ok(PruneDecision {
        layer_index: pinv.layer_index,
        q,
        row,
        col,
        theta,
        sensitivity,
        delta: BlockDelta { column: col, values },
        predicted_de: sensitivity,
    })
}

/// Prunes the least sensitive selectable parameter of `table`.
pub fn prune_one(layer: &mut Layer, table: &SensitivityTable, pinv: &PsiInverse) -> Result<PruneDecision> {
    let q = table.argmin().ok_or(LobsError::Exhausted {
        layer: table.layer_index,
    })?;
    apply_obs_update(layer, q, pinv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    TargetReached,
    ThresholdExceeded,
    Exhausted,
}

#[derive(Clone, Debug)]
pub struct LayerPruneOutcome {
    pub layer_index: usize,
    pub decisions: Vec<DecisionRecord>,
    /// Measured `E = (1/n)||Ẑ - Z||²` on the snapshot after pruning.
    pub layer_error: f64,
    /// Measured `ε = (1/√n)||σ(Ẑ) - σ(Z)||_F` on the snapshot.
    pub layer_epsilon: f64,
    pub stop: StopReason,
    pub warnings: Vec<String>,
}

/// Candidate about to be pruned, as seen by a [`run_layer`] observer.
pub(crate) struct Candidate {
    pub sqrt_sensitivity: f64,
}

/// The select/update loop shared by [`prune_layer`] and [`threshold_sweep`].
///
/// `observe` runs before each deletion with the layer in its current state.
pub(crate) fn run_layer<F>(
    layer: &mut Layer,
    pinv: &PsiInverse,
    target: PruneTarget,
    batch: usize,
    mut observe: F,
) -> Result<(Vec<PruneDecision>, StopReason, Vec<String>)>
where
    F: FnMut(&Layer, &Candidate),
{
    check_dims(layer, pinv)?;
    let total = layer.param_count();
    let mut active = layer.active_count();
    let keep = match target {
        PruneTarget::CompressionRatio(cr) => (cr * total as f64).round() as usize,
        _ => 0,
    };
    let mut decisions = Vec::new();
    let mut warnings = Vec::new();
    let mut warned = vec![false; layer.units()];
    let rows = layer.rows();
    loop {
        let table = sensitivities(layer, pinv)?;
        for c in 0..layer.units() {
            let block = c * rows..(c + 1) * rows;
            let any_active = block.clone().any(|q| !table.pruned[q]);
            if !warned[c] && any_active && block.clone().all(|q| table.pruned[q] || !table.scores[q].is_finite()) {
                warned[c] = true;
                let msg = format!("layer {}: unit {c} has no observed inputs, skipping its block", pinv.layer_index);
                ::log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        let order = table.smallest(batch);
        if order.is_empty() {
            return Ok((decisions, StopReason::Exhausted, warnings));
        }
        for q in order {
            match target {
                PruneTarget::Count(k) if decisions.len() >= k => {
                    return Ok((decisions, StopReason::TargetReached, warnings))
                }
                PruneTarget::CompressionRatio(_) if active <= keep => {
                    return Ok((decisions, StopReason::TargetReached, warnings))
                }
                _ => {}
            }
            let (r, c) = layer.position(q);
            let current = score(layer.weights[[r, c]], pinv.inv[[r, r]] / HESSIAN_SCALE);
            let candidate = Candidate {
                sqrt_sensitivity: current.sqrt(),
            };
            if let PruneTarget::Threshold(eps) = target {
                if candidate.sqrt_sensitivity > eps {
                    observe(layer, &candidate);
                    return Ok((decisions, StopReason::ThresholdExceeded, warnings));
                }
            }
            observe(layer, &candidate);
            decisions.push(apply_obs_update(layer, q, pinv)?);
            active -= 1;
        }
    }
}

/// Prunes one layer of `net` against a snapshot of its inputs.
pub fn prune_layer(
    net: &mut Network,
    layer_index: usize,
    snapshot: &LayerSnapshot,
    config: &PruneConfig,
) -> Result<LayerPruneOutcome> {
    config.validate()?;
    let pinv = recursive_psi_inverse(snapshot, config.alpha)?;
    prune_layer_with_inverse(net, layer_index, snapshot, &pinv, config)
}

/// [`prune_layer`] with a precomputed `Ψ^{-1}`.
pub fn prune_layer_with_inverse(
    net: &mut Network,
    layer_index: usize,
    snapshot: &LayerSnapshot,
    pinv: &PsiInverse,
    config: &PruneConfig,
) -> Result<LayerPruneOutcome> {
    config.validate()?;
    if layer_index >= net.num_layers() {
        return Err(LobsError::IndexOutOfRange {
            index: layer_index,
            len: net.num_layers(),
        });
    }
    let outcome = prune_single_layer(net.layer(layer_index), layer_index, snapshot, pinv, config)?;
    *net.layer_mut(layer_index) = outcome.0;
    Ok(outcome.1)
}

fn prune_single_layer(
    layer: &Layer,
    layer_index: usize,
    snapshot: &LayerSnapshot,
    pinv: &PsiInverse,
    config: &PruneConfig,
) -> Result<(Layer, LayerPruneOutcome)> {
    let mut layer = layer.clone();
    let (decisions, stop, warnings) = run_layer(
        &mut layer,
        pinv,
        config.target,
        config.batch_size_per_recompute,
        |_, _| {},
    )?;
    let (layer_error, layer_epsilon) = snapshot_error(&layer, snapshot)?;
    let decisions = decisions
        .into_iter()
        .map(|d| DecisionRecord::from_decision(&d, 0, layer_index, "lobs"))
        .collect();
    Ok((
        layer,
        LayerPruneOutcome {
            layer_index,
            decisions,
            layer_error,
            layer_epsilon,
            stop,
            warnings,
        },
    ))
}

/// One point of a threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub epsilon: f64,
    /// Pruned / original parameters of the layer.
    pub pruning_ratio: f64,
    /// Measured `E` on the snapshot at that threshold.
    pub layer_error: f64,
}

/// Pruning ratio and layer error reached for each tolerable error in `grid`.
///
/// Every threshold follows the same deletion sequence and differs only in
/// where it stops, so one pass with the largest threshold serves the grid.
pub fn threshold_sweep(
    net: &Network,
    layer_index: usize,
    snapshot: &LayerSnapshot,
    grid: &[f64],
    config: &PruneConfig,
) -> Result<Vec<SweepPoint>> {
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(LobsError::Precondition("threshold grid must be ascending".into()));
    }
    let Some(&max_eps) = grid.last() else {
        return Ok(Vec::new());
    };
    let pinv = recursive_psi_inverse(snapshot, config.alpha)?;
    threshold_sweep_with_inverse(net.layer(layer_index), snapshot, &pinv, grid, max_eps, config.batch_size_per_recompute)
}

fn threshold_sweep_with_inverse(
    layer: &Layer,
    snapshot: &LayerSnapshot,
    pinv: &PsiInverse,
    grid: &[f64],
    max_eps: f64,
    batch: usize,
) -> Result<Vec<SweepPoint>> {
    let total = layer.param_count() as f64;
    let mut layer = layer.clone();
    let mut points = Vec::with_capacity(grid.len());
    let mut failure = None;
    let mut record = |l: &Layer, eps: f64, points: &mut Vec<SweepPoint>| match snapshot_error(l, snapshot) {
        Ok((e, _)) => points.push(SweepPoint {
            epsilon: eps,
            pruning_ratio: 1.0 - l.active_count() as f64 / total,
            layer_error: e,
        }),
        Err(err) => failure = Some(err),
    };
    let mut next = 0;
    run_layer(&mut layer, pinv, PruneTarget::Threshold(max_eps), batch, |l, cand| {
        while next < grid.len() && cand.sqrt_sensitivity > grid[next] {
            record(l, grid[next], &mut points);
            next += 1;
        }
    })?;
    while next < grid.len() {
        record(&layer, grid[next], &mut points);
        next += 1;
    }
    if let Some(err) = failure {
        return Err(err);
    }
    Ok(points)
}

/// Options shared by every stage of an iterative run.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneOptions {
    pub alpha: f64,
    pub batch_size_per_recompute: usize,
    pub snapshot: SnapshotOptions,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions {
            alpha: DEFAULT_ALPHA,
            batch_size_per_recompute: DEFAULT_RECOMPUTE_BATCH,
            snapshot: SnapshotOptions::default(),
        }
    }
}

/// Layers to prune in one stage and the retraining that follows.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub targets: Vec<(usize, PruneTarget)>,
    pub retrain: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: usize,
    pub compression_ratio: f64,
    pub layer_ratios: Vec<f64>,
    pub error_after_pruning: f64,
    pub error_after_retraining: f64,
    pub retrain_iterations: usize,
    pub layers: Vec<LayerPruneOutcome>,
    /// `Ψ^{-1}` used for each pruned layer, in schedule order.
    pub inverses: Vec<PsiInverse>,
}

#[derive(Clone, Debug)]
pub struct IterativeOutcome {
    pub net: Network,
    pub stages: Vec<StageReport>,
}

/// Prunes every scheduled layer of `net` from a single set of snapshots.
///
/// Layers are independent (each sees the unpruned inputs captured up front),
/// so they run concurrently.
pub fn prune_network(
    net: &Network,
    probe: &Dataset,
    targets: &[(usize, PruneTarget)],
    options: &PruneOptions,
) -> Result<(Network, Vec<LayerPruneOutcome>, Vec<PsiInverse>)> {
    for (l, t) in targets {
        t.validate()?;
        if *l >= net.num_layers() {
            return Err(LobsError::IndexOutOfRange {
                index: *l,
                len: net.num_layers(),
            });
        }
    }
    let snapshots = capture_snapshots_with(net, probe, &options.snapshot)?;
    let results = par::map_slice(targets, |&(l, target)| -> Result<(Layer, LayerPruneOutcome, PsiInverse)> {
        let pinv = recursive_psi_inverse(&snapshots[l], options.alpha)?;
        let config = PruneConfig {
            target,
            batch_size_per_recompute: options.batch_size_per_recompute,
            alpha: options.alpha,
        };
        let (layer, outcome) = prune_single_layer(net.layer(l), l, &snapshots[l], &pinv, &config)?;
        Ok((layer, outcome, pinv))
    });
    let mut pruned = net.clone();
    let mut outcomes = Vec::with_capacity(targets.len());
    let mut inverses = Vec::with_capacity(targets.len());
    for ((l, _), res) in targets.iter().zip(results) {
        let (layer, outcome, pinv) = res?;
        for w in &outcome.warnings {
            ::log::warn!("{w}");
        }
        *pruned.layer_mut(*l) = layer;
        outcomes.push(outcome);
        inverses.push(pinv);
    }
    Ok((pruned, outcomes, inverses))
}

/// Alternating prune / retrain stages.
pub fn iterative_lobs(
    net: &Network,
    train: &Dataset,
    eval: &Dataset,
    probe: &Dataset,
    stages: &[StagePlan],
    options: &PruneOptions,
) -> Result<IterativeOutcome> {
    if stages.is_empty() {
        return Err(LobsError::Precondition("iterative pruning needs at least one stage".into()));
    }
    let mut current = net.clone();
    let mut reports = Vec::with_capacity(stages.len());
    for (s, plan) in stages.iter().enumerate() {
        let (pruned, mut layers, inverses) = prune_network(&current, probe, &plan.targets, options)?;
        for outcome in &mut layers {
            for d in &mut outcome.decisions {
                d.stage = s;
            }
        }
        let error_after_pruning = pruned.error_rate(eval)?;
        let retrained = if plan.retrain.iterations > 0 {
            train_sgd(&pruned, train, &plan.retrain)?.net
        } else {
            pruned
        };
        let error_after_retraining = retrained.error_rate(eval)?;
        reports.push(StageReport {
            stage: s,
            compression_ratio: retrained.compression_ratio(),
            layer_ratios: retrained
                .layers()
                .iter()
                .map(|l| l.active_count() as f64 / l.param_count() as f64)
                .collect(),
            error_after_pruning,
            error_after_retraining,
            retrain_iterations: plan.retrain.iterations,
            layers,
            inverses,
        });
        current = retrained;
    }
    Ok(IterativeOutcome {
        net: current,
        stages: reports,
    })
}
