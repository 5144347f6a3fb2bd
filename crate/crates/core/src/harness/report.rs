use std::fmt::Write as _;
use std::io::Write;

use super::{Pruned, Retrained};
use crate::baselines::Criterion;
use crate::bounds::BoundReport;
use crate::error::{LobsError, Result};
use crate::net::Network;
use crate::pruner::StageReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub layer: usize,
    pub total: usize,
    pub preserved: usize,
}

impl LayerCount {
    pub fn ratio(&self) -> f64 {
        self.preserved as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: usize,
    pub compression_ratio: f64,
    pub error_after_pruning: f64,
    pub error_after_retraining: f64,
    pub retrain_iterations: usize,
}

impl From<&StageReport> for StageSummary {
    fn from(s: &StageReport) -> Self {
        StageSummary {
            stage: s.stage,
            compression_ratio: s.compression_ratio,
            error_after_pruning: s.error_after_pruning,
            error_after_retraining: s.error_after_retraining,
            retrain_iterations: s.retrain_iterations,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub criterion: String,
    pub original_error: f64,
    /// Counts after pruning; retraining never revives weights.
    pub layers: Vec<LayerCount>,
    pub compression_ratio: f64,
    pub error_after_pruning: f64,
    pub error_after_retraining: f64,
    /// Retraining steps actually run.
    pub retrain_iterations: usize,
    /// First evaluated step at or below `recovery_target`.
    pub recovery_iteration: Option<usize>,
    pub recovery_target: f64,
    pub stages: Vec<StageSummary>,
    pub bounds: BoundReport,
    pub warnings: Vec<String>,
    /// Wall-clock seconds per phase.
    pub timings: Vec<(String, f64)>,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        criterion: Criterion,
        original: &Network,
        pruned: &Pruned,
        original_error: f64,
        error_after_pruning: f64,
        retrained: &Retrained,
        recovery_target: f64,
        bounds: BoundReport,
        timings: Vec<(String, f64)>,
    ) -> Self {
        let layers: Vec<LayerCount> = pruned
            .net
            .layers()
            .iter()
            .enumerate()
            .map(|(l, layer)| LayerCount {
                layer: l,
                total: original.layer(l).param_count(),
                preserved: layer.active_count(),
            })
            .collect();
        let kept: usize = layers.iter().map(|c| c.preserved).sum();
        let total: usize = layers.iter().map(|c| c.total).sum();
        RunReport {
            criterion: criterion.name().to_string(),
            original_error,
            compression_ratio: kept as f64 / total as f64,
            layers,
            error_after_pruning,
            error_after_retraining: retrained.final_error,
            retrain_iterations: retrained.iterations,
            recovery_iteration: retrained.recovered_at,
            recovery_target,
            stages: pruned.stages.clone(),
            bounds,
            warnings: pruned.warnings.clone(),
            timings,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let pct = |v: f64| format!("{:.2}%", 100.0 * v);
        let _ = writeln!(s, "criterion              {}", self.criterion);
        let _ = writeln!(s, "original error         {}", pct(self.original_error));
        let _ = writeln!(s, "compression ratio      {}", pct(self.compression_ratio));
        for c in &self.layers {
            let _ = writeln!(
                s,
                "  layer {:<2}             {} ({} / {})",
                c.layer,
                pct(c.ratio()),
                c.preserved,
                c.total
            );
        }
        let _ = writeln!(s, "error after pruning    {}", pct(self.error_after_pruning));
        let _ = writeln!(s, "error after retraining {}", pct(self.error_after_retraining));
        let recovery = match self.recovery_iteration {
            Some(i) => i.to_string(),
            None => format!("not reached in {} iterations", self.retrain_iterations),
        };
        let _ = writeln!(s, "recovery target        {}", pct(self.recovery_target));
        let _ = writeln!(s, "iterations to recovery {recovery}");
        for st in &self.stages {
            let _ = writeln!(
                s,
                "  stage {}: CR {}, pruned {}, retrained {} after {} iterations",
                st.stage,
                pct(st.compression_ratio),
                pct(st.error_after_pruning),
                pct(st.error_after_retraining),
                st.retrain_iterations
            );
        }
        let layer_ok = if self.bounds.layer_bound_holds() { "holds" } else { "VIOLATED" };
        let _ = writeln!(s, "layer-wise bound       {layer_ok}");
        let _ = writeln!(s, "{}", self.bounds.summary());
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        for (phase, secs) in &self.timings {
            let _ = writeln!(s, "time {phase:<17} {secs:.2}s");
        }
        s
    }

    /// One `metric,value` row per number.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let mut rows: Vec<(String, String)> = vec![
            ("criterion".into(), self.criterion.clone()),
            ("original_error".into(), self.original_error.to_string()),
            ("compression_ratio".into(), self.compression_ratio.to_string()),
        ];
        for c in &self.layers {
            rows.push((format!("layer{}_preserved", c.layer), c.preserved.to_string()));
            rows.push((format!("layer{}_total", c.layer), c.total.to_string()));
            rows.push((format!("layer{}_ratio", c.layer), c.ratio().to_string()));
        }
        rows.extend([
            ("error_after_pruning".into(), self.error_after_pruning.to_string()),
            ("error_after_retraining".into(), self.error_after_retraining.to_string()),
            ("retrain_iterations".into(), self.retrain_iterations.to_string()),
            (
                "recovery_iteration".into(),
                self.recovery_iteration.map_or(String::new(), |i| i.to_string()),
            ),
            ("recovery_target".into(), self.recovery_target.to_string()),
            ("accumulated_error".into(), self.bounds.accumulated.to_string()),
            ("network_bound".into(), self.bounds.network_bound.to_string()),
            ("layer_bound_holds".into(), self.bounds.layer_bound_holds().to_string()),
            (
                "network_bound_holds".into(),
                self.bounds.network_bound_holds().map_or(String::new(), |b| b.to_string()),
            ),
            ("xi_r_estimate".into(), self.bounds.xi_r.estimate.to_string()),
            ("xi_r_measured".into(), self.bounds.xi_r.measured.to_string()),
        ]);
        for st in &self.stages {
            let p = format!("stage{}_", st.stage);
            rows.push((format!("{p}compression_ratio"), st.compression_ratio.to_string()));
            rows.push((format!("{p}error_after_pruning"), st.error_after_pruning.to_string()));
            rows.push((format!("{p}error_after_retraining"), st.error_after_retraining.to_string()));
            rows.push((format!("{p}retrain_iterations"), st.retrain_iterations.to_string()));
        }
        for (phase, secs) in &self.timings {
            rows.push((format!("seconds_{phase}"), secs.to_string()));
        }
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["metric", "value"])?;
        for (k, v) in rows {
            w.write_record([k, v])?;
        }
        w.flush().map_err(|e| LobsError::io("<report>", e))
    }
}
