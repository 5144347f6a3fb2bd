use crate::error::{LobsError, Result};
use crate::pruner::SensitivityTable;

/// Log-spaced histogram of the active, finite sensitivities of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityHistogram {
    /// `bins + 1` ascending edges; values below the first edge (including
    /// exact zeros) land in the first bin.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub cutoff: f64,
    pub fraction_below_cutoff: f64,
    pub total: usize,
}

pub fn sensitivity_histogram(table: &SensitivityTable, bins: usize, cutoff: f64) -> Result<SensitivityHistogram> {
    if bins == 0 {
        return Err(LobsError::Precondition("histogram needs at least one bin".into()));
    }
    let values: Vec<f64> = (0..table.len())
        .filter(|&q| table.selectable(q))
        .map(|q| table.scores[q])
        .collect();
    if values.is_empty() {
        return Err(LobsError::Precondition("sensitivity table has no active entries".into()));
    }
    let total = values.len();
    let below = values.iter().filter(|&&v| v < cutoff).count();
    let max = values.iter().cloned().fold(0.0, f64::max);
    let min_pos = values.iter().cloned().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);

    let mut counts = vec![0; bins];
    let edges: Vec<f64> = if !min_pos.is_finite() || min_pos == max {
        // One distinct positive value (or none): a single degenerate bin.
        let hi = if max > 0.0 { max } else { 1.0 };
        counts[0] = total;
        std::iter::once(hi).chain(std::iter::repeat_n(hi, bins)).collect()
    } else {
        let (lo, hi) = (min_pos.log10(), max.log10());
        let width = (hi - lo) / bins as f64;
        for &v in &values {
            let b = if v <= min_pos {
                0
            } else {
                (((v.log10() - lo) / width) as usize).min(bins - 1)
            };
            counts[b] += 1;
        }
        (0..=bins).map(|i| 10f64.powf(lo + width * i as f64)).collect()
    };
    let fractions = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(SensitivityHistogram {
        edges,
        counts,
        fractions,
        cutoff,
        fraction_below_cutoff: below as f64 / total as f64,
        total,
    })
}
