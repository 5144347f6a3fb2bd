//! Comparison criteria: random, magnitude, diagonal-Hessian and ApoZW scores,
//! plus ratio-driven deletion under any of them.

use std::fmt;
use std::str::FromStr;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LobsError, Result};
use crate::hessian::{accumulate_psi, recursive_psi_inverse, PsiInverse, DEFAULT_ALPHA, HESSIAN_SCALE};
use crate::net::{Layer, LayerSnapshot, Network};
use crate::pruner::{run_layer, DecisionRecord, PruneTarget, SensitivityTable, DEFAULT_RECOMPUTE_BATCH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Random(u64),
    Magnitude,
    ObdDiagonal,
    ApoZw,
    Lobs,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Random(_) => "random",
            Criterion::Magnitude => "magnitude",
            Criterion::ObdDiagonal => "obd",
            Criterion::ApoZw => "apozw",
            Criterion::Lobs => "lobs",
        }
    }

    /// Parses a criterion name; `seed` is used by `random`.
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "random" => Criterion::Random(seed),
            "magnitude" | "lwc" => Criterion::Magnitude,
            "obd" => Criterion::ObdDiagonal,
            "apozw" => Criterion::ApoZw,
            "lobs" | "l-obs" => Criterion::Lobs,
            other => {
                return Err(LobsError::Config(format!(
                    "unknown criterion `{other}` (expected random, magnitude, obd, apozw or lobs)"
                )))
            }
        })
    }

    /// Baselines only delete; L-OBS also compensates.
    pub fn compensates(&self) -> bool {
        matches!(self, Criterion::Lobs)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = LobsError;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::parse(s, 0)
    }
}

fn table(layer: &Layer, layer_index: usize, score: impl Fn(usize, usize, f64) -> f64) -> SensitivityTable {
    let rows = layer.rows();
    let w = layer.weights();
    let mask = layer.mask();
    let mut scores = Vec::with_capacity(layer.param_count());
    let mut pruned = Vec::with_capacity(layer.param_count());
    for c in 0..layer.units() {
        for r in 0..rows {
            let active = mask[[r, c]];
            scores.push(if active { score(r, c, w[[r, c]]) } else { 0.0 });
            pruned.push(!active);
        }
    }
    SensitivityTable {
        layer_index,
        scores,
        pruned,
    }
}

fn check_snapshot(layer: &Layer, snapshot: &LayerSnapshot) -> Result<()> {
    if snapshot.inputs.nrows() != layer.rows() {
        return Err(LobsError::dim(
            snapshot.layer_index,
            format!("snapshot has {} input rows, layer has {}", snapshot.inputs.nrows(), layer.rows()),
        ));
    }
    Ok(())
}

/// `|θ_q|`.
pub fn score_magnitude(layer: &Layer, layer_index: usize) -> SensitivityTable {
    table(layer, layer_index, |_, _, w| w.abs())
}

/// `½ θ_q² H_qq` from the diagonal of the layer Hessian alone.
pub fn score_obd_diagonal(layer: &Layer, snapshot: &LayerSnapshot) -> Result<SensitivityTable> {
    check_snapshot(layer, snapshot)?;
    let psi = accumulate_psi(snapshot)?;
    let diag = psi.psi.diag().to_owned();
    Ok(table(layer, snapshot.layer_index, |r, _, w| 0.5 * w * w * HESSIAN_SCALE * diag[r]))
}

/// `|(1/n) Σ_p y_rp θ_rc|`, with the mean taken over the signed inputs.
pub fn score_apozw(layer: &Layer, snapshot: &LayerSnapshot) -> Result<SensitivityTable> {
    check_snapshot(layer, snapshot)?;
    if snapshot.is_empty() {
        return Err(LobsError::Precondition("snapshot is empty".into()));
    }
    let mean = snapshot.inputs.mean_axis(Axis(1)).expect("non-empty snapshot");
    Ok(table(layer, snapshot.layer_index, |r, _, w| (mean[r] * w).abs()))
}

/// A seeded random permutation of `0..len` used as scores.
pub fn score_random(layer: &Layer, layer_index: usize, seed: u64) -> SensitivityTable {
    let mut perm: Vec<usize> = (0..layer.param_count()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    table(layer, layer_index, |r, c, _| perm[c * layer.rows() + r] as f64)
}

/// Scores under `criterion`; `pinv` is only consulted by L-OBS.
pub fn score(
    criterion: Criterion,
    layer: &Layer,
    snapshot: &LayerSnapshot,
    pinv: Option<&PsiInverse>,
) -> Result<SensitivityTable> {
    let l = snapshot.layer_index;
    match criterion {
        Criterion::Random(seed) => Ok(score_random(layer, l, seed)),
        Criterion::Magnitude => Ok(score_magnitude(layer, l)),
        Criterion::ObdDiagonal => score_obd_diagonal(layer, snapshot),
        Criterion::ApoZw => score_apozw(layer, snapshot),
        Criterion::Lobs => match pinv {
            Some(p) => crate::pruner::sensitivities(layer, p),
            None => crate::pruner::sensitivities(layer, &recursive_psi_inverse(snapshot, DEFAULT_ALPHA)?),
        },
    }
}

/// `⌈ratio · active⌉`, ignoring floating-point dust just above an integer.
pub fn prune_count(ratio: f64, active: usize) -> usize {
    let exact = ratio * active as f64;
    let nearest = exact.round();
    let k = if (exact - nearest).abs() <= 1e-9 * exact.max(1.0) {
        nearest
    } else {
        exact.ceil()
    };
    (k as usize).min(active)
}

/// Deletes `⌈ratio · active⌉` parameters of one layer in ascending score order.
///
/// Baselines zero and mask the selected weights without touching the rest;
/// [`Criterion::Lobs`] runs the compensating pruner. `pinv` defaults to the
/// inverse built from `snapshot`.
pub fn prune_by_criterion(
    net: &mut Network,
    layer_index: usize,
    criterion: Criterion,
    ratio: f64,
    snapshot: &LayerSnapshot,
    pinv: Option<&PsiInverse>,
) -> Result<Vec<DecisionRecord>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(LobsError::Precondition(format!("pruning ratio must lie in (0, 1], got {ratio}")));
    }
    if layer_index >= net.num_layers() {
        return Err(LobsError::IndexOutOfRange {
            index: layer_index,
            len: net.num_layers(),
        });
    }
    let k = prune_count(ratio, net.layer(layer_index).active_count());
    prune_exact(net, layer_index, criterion, k, snapshot, pinv)
}

/// Deletes exactly `count` active parameters (all of them if fewer remain).
///
/// L-OBS recomputes its ranking every [`DEFAULT_RECOMPUTE_BATCH`] deletions;
/// if only degenerate directions are left it finishes the quota by plain
/// deletion in index order, logged as `lobs-fill`.
pub fn prune_exact(
    net: &mut Network,
    layer_index: usize,
    criterion: Criterion,
    count: usize,
    snapshot: &LayerSnapshot,
    pinv: Option<&PsiInverse>,
) -> Result<Vec<DecisionRecord>> {
    if layer_index >= net.num_layers() {
        return Err(LobsError::IndexOutOfRange {
            index: layer_index,
            len: net.num_layers(),
        });
    }
    let layer = net.layer_mut(layer_index);
    check_snapshot(layer, snapshot)?;
    let k = count.min(layer.active_count());
    let name = criterion.name();
    if !criterion.compensates() {
        let scores = score(criterion, layer, snapshot, None)?;
        return Ok(delete_lowest(layer, layer_index, &scores.scores, k, name));
    }

    let owned;
    let pinv = match pinv {
        Some(p) => p,
        None => {
            owned = recursive_psi_inverse(snapshot, DEFAULT_ALPHA)?;
            &owned
        }
    };
    let mut work = layer.clone();
    let (decisions, _, _) = run_layer(&mut work, pinv, PruneTarget::Count(k), DEFAULT_RECOMPUTE_BATCH, |_, _| {})?;
    let mut records: Vec<DecisionRecord> = decisions
        .iter()
        .map(|d| DecisionRecord::from_decision(d, 0, layer_index, name))
        .collect();
    if records.len() < k {
        let zeros = vec![0.0; work.param_count()];
        let rest = k - records.len();
        records.extend(delete_lowest(&mut work, layer_index, &zeros, rest, FILL_CRITERION));
    }
    *layer = work;
    Ok(records)
}

/// Criterion tag of the plain deletions that complete an L-OBS quota.
pub const FILL_CRITERION: &str = "lobs-fill";

fn delete_lowest(layer: &mut Layer, layer_index: usize, scores: &[f64], k: usize, name: &str) -> Vec<DecisionRecord> {
    let rows = layer.rows();
    let mask = layer.mask();
    let t = SensitivityTable {
        layer_index,
        scores: scores
            .iter()
            .map(|&s| if s.is_finite() { s } else { f64::MAX })
            .collect(),
        pruned: (0..layer.param_count()).map(|q| !mask[[q % rows, q / rows]]).collect(),
    };
    let order = t.smallest(k);
    order
        .into_iter()
        .map(|q| {
            let (row, col) = layer.position(q);
            let theta = layer.weights()[[row, col]];
            layer.prune_entry(row, col);
            DecisionRecord {
                stage: 0,
                layer: layer_index,
                q,
                row,
                col,
                theta,
                sensitivity: t.scores[q],
                cumulative_cr: f64::NAN,
                criterion: name.to_string(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{capture_snapshots, Activation, Dataset, Split};
    use ndarray::{array, Array2};

    fn dense(w: Array2<f64>) -> Layer {
        Layer::dense(w, Activation::Relu).unwrap()
    }

    fn snap(inputs: Array2<f64>) -> LayerSnapshot {
        LayerSnapshot {
            layer_index: 0,
            pre_activations: Array2::zeros((1, inputs.ncols())),
            inputs,
        }
    }

    #[test]
    fn magnitude_scores() {
        let t = score_magnitude(&dense(array![[-3.0], [1.0]]), 0);
        assert_eq!(t.scores, vec![3.0, 1.0]);
        let t = score_magnitude(&dense(Array2::zeros((2, 2))), 0);
        assert!(t.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn apozw_hand_example() {
        // two samples (1, 2) and (3, 4); no bias row here
        let s = snap(array![[1.0, 3.0], [2.0, 4.0]]);
        let t = score_apozw(&dense(array![[1.0], [-1.0]]), &s).unwrap();
        assert_eq!(t.scores, vec![2.0, 3.0]);
        let t = score_apozw(&dense(array![[0.0], [-1.0]]), &s).unwrap();
        assert_eq!(t.scores[0], 0.0);
    }

    #[test]
    fn apozw_uses_signed_mean() {
        let s = snap(array![[1.0, -1.0], [1.0, 1.0]]);
        assert_eq!(score_apozw(&dense(array![[5.0], [1.0]]), &s).unwrap().scores, vec![0.0, 1.0]);
    }

    #[test]
    fn obd_with_identity_psi_matches_magnitude_order() {
        // Ψ = I from orthonormal columns scaled by sqrt(n)
        let s = snap(array![[2f64.sqrt(), 0.0], [0.0, 2f64.sqrt()]]);
        let l = dense(array![[0.3, -2.0], [1.5, 0.1]]);
        let a = score_obd_diagonal(&l, &s).unwrap().smallest(4);
        let b = score_magnitude(&l, 0).smallest(4);
        assert_eq!(a, b);
    }

    #[test]
    fn random_is_seeded_permutation() {
        let l = dense(Array2::ones((4, 3)));
        let a = score_random(&l, 0, 7);
        assert_eq!(a, score_random(&l, 0, 7));
        let mut sorted = a.scores.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, (0..12).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn count_rounding() {
        assert_eq!(prune_count(0.3, 1000), 300);
        assert_eq!(prune_count(0.3001, 1000), 301);
        assert_eq!(prune_count(1.0, 17), 17);
        assert_eq!(prune_count(1e-9, 17), 1);
    }

    #[test]
    fn full_ratio_zeroes_layer_for_every_criterion() {
        let x = Array2::from_shape_fn((3, 20), |(i, j)| ((i * 5 + j * 7) % 11) as f64 / 10.0);
        let data = Dataset::new(x, vec![0; 20], 2, Split::Probe).unwrap();
        let base = Network::mlp(&[3, 4, 2], 3).unwrap();
        let snaps = capture_snapshots(&base, &data).unwrap();
        for c in [Criterion::Random(1), Criterion::Magnitude, Criterion::ObdDiagonal, Criterion::ApoZw, Criterion::Lobs] {
            let mut net = base.clone();
            let recs = prune_by_criterion(&mut net, 0, c, 1.0, &snaps[0], None).unwrap();
            assert_eq!(recs.len(), 16, "{c}");
            assert!(net.layer(0).weights().iter().all(|&w| w == 0.0), "{c}");
        }
    }

    #[test]
    fn exact_counts() {
        let x = Array2::from_shape_fn((3, 20), |(i, j)| ((i * 5 + j * 7) % 11) as f64 / 10.0);
        let data = Dataset::new(x, vec![0; 20], 2, Split::Probe).unwrap();
        let base = Network::mlp(&[3, 4, 2], 3).unwrap();
        let snaps = capture_snapshots(&base, &data).unwrap();
        for c in [Criterion::Random(1), Criterion::Magnitude, Criterion::ObdDiagonal, Criterion::ApoZw, Criterion::Lobs] {
            let mut net = base.clone();
            prune_by_criterion(&mut net, 0, c, 0.3, &snaps[0], None).unwrap();
            assert_eq!(net.layer(0).active_count(), 16 - 5, "{c}");
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!(Criterion::parse("LWC", 0).unwrap(), Criterion::Magnitude);
        assert_eq!(Criterion::parse("random", 4).unwrap(), Criterion::Random(4));
        assert!(Criterion::parse("dns", 0).is_err());
    }
}
