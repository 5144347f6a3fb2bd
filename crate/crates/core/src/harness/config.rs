//! TOML experiment description.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::Criterion;
use crate::error::{LobsError, Result};
use crate::hessian::{ALPHA_RANGE, DEFAULT_ALPHA};
use crate::net::{Network, NetworkBuilder, TrainConfig};
use crate::pruner::{PruneTarget, DEFAULT_RECOMPUTE_BATCH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub prune: PrunePlan,
    #[serde(default)]
    pub retrain: RetrainConfig,
    #[serde(default)]
    pub curve: CurveConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Mnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory with the four uncompressed MNIST IDX files.
    pub dir: PathBuf,
    pub probe_size: usize,
    pub probe_seed: u64,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Mnist,
            dir: PathBuf::from("data/mnist"),
            probe_size: 1000,
            probe_seed: 0,
            train_limit: None,
            test_limit: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Gaussian-like class clusters, for smoke tests without MNIST.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dim: 16,
            classes: 4,
            train: 2000,
            test: 500,
            spread: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `[channels, height, width]`; use `[1, 1, d]` for flat inputs.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Load this container instead of training from scratch.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl ModelConfig {
    pub fn build(&self) -> Result<Network> {
        let [c, h, w] = self.input;
        let mut b = NetworkBuilder::new((c, h, w));
        for spec in &self.layers {
            b = match *spec {
                LayerSpec::Dense { units } => b.dense(units),
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    padding,
                } => b.conv(channels, kernel, stride, padding),
            };
        }
        b.build(self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Target compression ratio per scheduled layer after this stage.
    pub layer_ratios: Vec<f64>,
    pub retrain_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrunePlan {
    pub criterion: String,
    /// Layers to prune, in order; all layers when empty.
    pub layers: Vec<usize>,
    /// Preserved / original parameters per scheduled layer.
    pub layer_ratios: Option<Vec<f64>>,
    /// Tolerable error ε per scheduled layer (L-OBS only).
    pub thresholds: Option<Vec<f64>>,
    /// Iterative prune / retrain stages (L-OBS only).
    pub stages: Vec<StageSpec>,
    pub alpha: f64,
    pub batch_size_per_recompute: usize,
    pub conv_positions: usize,
    pub seed: u64,
}

impl Default for PrunePlan {
    fn default() -> Self {
        PrunePlan {
            criterion: "lobs".into(),
            layers: Vec::new(),
            layer_ratios: None,
            thresholds: None,
            stages: Vec::new(),
            alpha: DEFAULT_ALPHA,
            batch_size_per_recompute: DEFAULT_RECOMPUTE_BATCH,
            conv_positions: crate::net::snapshot::DEFAULT_CONV_POSITIONS,
            seed: 0,
        }
    }
}

impl PrunePlan {
    pub fn criterion(&self) -> Result<Criterion> {
        Criterion::parse(&self.criterion, self.seed)
    }

    /// Scheduled layer indices for a network with `layers` layers.
    pub fn schedule(&self, layers: usize) -> Vec<usize> {
        if self.layers.is_empty() {
            (0..layers).collect()
        } else {
            self.layers.clone()
        }
    }

    /// Per-layer targets of a single-stage plan.
    pub fn targets(&self, layers: usize) -> Result<Vec<(usize, PruneTarget)>> {
        let schedule = self.schedule(layers);
        let targets: Vec<PruneTarget> = match (&self.layer_ratios, &self.thresholds) {
            (Some(r), None) => r.iter().map(|&c| PruneTarget::CompressionRatio(c)).collect(),
            (None, Some(t)) => t.iter().map(|&e| PruneTarget::Threshold(e)).collect(),
            (None, None) => vec![PruneTarget::CompressionRatio(1.0); schedule.len()],
            (Some(_), Some(_)) => {
                return Err(LobsError::Config("set either prune.layer_ratios or prune.thresholds, not both".into()))
            }
        };
        if targets.len() != schedule.len() {
            return Err(LobsError::Config(format!(
                "{} per-layer targets for {} scheduled layers",
                targets.len(),
                schedule.len()
            )));
        }
        Ok(schedule.into_iter().zip(targets).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    /// Upper bound on retraining steps.
    pub iterations: usize,
    /// Test error is measured every this many steps.
    pub eval_every: usize,
    /// Learning rate for L-OBS; defaults to the training rate.
    pub lr: Option<f64>,
    /// Baselines retrain at `lr * baseline_lr_factor`.
    pub baseline_lr_factor: f64,
    /// Absolute test error that counts as recovered; defaults to the
    /// original error plus `recovery_margin`.
    pub recovery_target: Option<f64>,
    pub recovery_margin: f64,
    /// Stop as soon as the target is reached.
    pub stop_at_recovery: bool,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            iterations: 2000,
            eval_every: 10,
            lr: None,
            baseline_lr_factor: 0.1,
            recovery_target: None,
            recovery_margin: 0.002,
            stop_at_recovery: true,
        }
    }
}

impl RetrainConfig {
    pub fn target(&self, original_error: f64) -> f64 {
        self.recovery_target.unwrap_or(original_error + self.recovery_margin)
    }

    /// SGD settings for retraining after pruning with `criterion`.
    pub fn train_config(&self, base: &TrainConfig, criterion: Criterion) -> TrainConfig {
        let lr = self.lr.unwrap_or(base.lr);
        TrainConfig {
            lr: if criterion.compensates() { lr } else { lr * self.baseline_lr_factor },
            iterations: self.iterations,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    pub layer: usize,
    /// Pruning ratios (pruned / original) in `(0, 1]`.
    pub ratios: Vec<f64>,
    pub criteria: Vec<String>,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig {
            layer: 0,
            ratios: (1..=20).map(|i| i as f64 * 0.05).collect(),
            criteria: ["lobs", "magnitude", "obd", "apozw", "random"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| LobsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LobsError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies one seed to every seeded stage.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.prune.seed = seed;
        self.data.probe_seed = seed;
        self.data.synthetic.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LobsError::Config(m));
        if self.model.layers.is_empty() {
            return bad("model.layers must not be empty".into());
        }
        if self.data.probe_size == 0 {
            return bad("data.probe_size must be positive".into());
        }
        let p = &self.prune;
        p.criterion()?;
        if !(ALPHA_RANGE.0..=ALPHA_RANGE.1).contains(&p.alpha) {
            return bad(format!("prune.alpha must lie in [{:e}, {:e}]", ALPHA_RANGE.0, ALPHA_RANGE.1));
        }
        if p.batch_size_per_recompute == 0 || p.conv_positions == 0 {
            return bad("prune.batch_size_per_recompute and prune.conv_positions must be positive".into());
        }
        let n = self.model.layers.len();
        if let Some(&l) = p.layers.iter().find(|&&l| l >= n) {
            return bad(format!("prune.layers names layer {l} but the model has {n}"));
        }
        let schedule = p.schedule(n).len();
        for (s, st) in p.stages.iter().enumerate() {
            if st.layer_ratios.len() != schedule {
                return bad(format!(
                    "stage {s} has {} ratios for {schedule} scheduled layers",
                    st.layer_ratios.len()
                ));
            }
        }
        if !p.stages.is_empty() && (p.layer_ratios.is_some() || p.thresholds.is_some()) {
            return bad("prune.stages cannot be combined with layer_ratios or thresholds".into());
        }
        for (l, t) in p.targets(n)? {
            t.validate().map_err(|e| LobsError::Config(format!("layer {l}: {e}")))?;
        }
        for st in &p.stages {
            for &c in &st.layer_ratios {
                PruneTarget::CompressionRatio(c).validate().map_err(|e| LobsError::Config(e.to_string()))?;
            }
        }
        if self.retrain.eval_every == 0 {
            return bad("retrain.eval_every must be positive".into());
        }
        if let Some(&r) = self.curve.ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
            return bad(format!("curve ratio {r} outside (0, 1]"));
        }
        for c in &self.curve.criteria {
            Criterion::parse(c, 0)?;
        }
        Ok(())
    }
}
