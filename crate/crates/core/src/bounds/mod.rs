//! Layer-wise and accumulated error measurements, and runtime checks of the
//! error-propagation bounds.

mod histogram;

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{LobsError, Result};
use crate::net::{Activation, Layer, LayerSnapshot, Network};

pub use histogram::{sensitivity_histogram, SensitivityHistogram};

/// Slack allowed on every bound check.
pub const BOUND_TOLERANCE: f64 = 1e-9;

fn sq_dist(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
}

/// `(E, ε)` with `E = (1/n)||Ẑ - Z||²_F` and `ε = (1/√n)||σ(Ẑ) - σ(Z)||_F`.
pub fn layer_error(z: ArrayView2<f64>, z_hat: ArrayView2<f64>, activation: Activation) -> Result<(f64, f64)> {
    if z.dim() != z_hat.dim() {
        return Err(LobsError::Precondition(format!(
            "pre-activation shapes differ: {:?} vs {:?}",
            z.dim(),
            z_hat.dim()
        )));
    }
    let n = z.ncols() as f64;
    let e = sq_dist(z, z_hat) / n;
    let dy = Zip::from(z).and(z_hat).fold(0.0, |acc, &a, &b| {
        let d = activation.apply(b) - activation.apply(a);
        acc + d * d
    });
    Ok((e, (dy / n).sqrt()))
}

/// [`layer_error`] of `layer` against the pre-activations stored in a snapshot.
pub fn snapshot_error(layer: &Layer, snapshot: &LayerSnapshot) -> Result<(f64, f64)> {
    if snapshot.inputs.nrows() != layer.rows() {
        return Err(LobsError::dim(
            snapshot.layer_index,
            format!("snapshot has {} input rows, layer has {}", snapshot.inputs.nrows(), layer.rows()),
        ));
    }
    let z_hat = layer.lowered_pre_activation(&snapshot.inputs);
    layer_error(snapshot.pre_activations.view(), z_hat.view(), layer.activation())
}

/// `ε̃^l = (1/√n)||Ỹ^l - Y^l||_F` for every layer, chaining each net on its own outputs.
pub fn accumulated_error(original: &Network, pruned: &Network, probe: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_topology(original, pruned)?;
    let a = original.forward(probe)?;
    let b = pruned.forward(probe)?;
    let n = probe.ncols() as f64;
    Ok(a.outputs
        .iter()
        .zip(&b.outputs)
        .map(|(y, y_t)| (sq_dist(y.view(), y_t.view()) / n).sqrt())
        .collect())
}

fn check_topology(a: &Network, b: &Network) -> Result<()> {
    if !a.same_topology(b) {
        return Err(LobsError::Topology("original and pruned networks differ in structure".into()));
    }
    Ok(())
}

/// `Σ_{k<L} (Π_{l>k} ||Θ̂_l||_F) √δE^k + √δE^L`.
pub fn network_bound(delta_e: &[f64], norms: &[f64]) -> Result<f64> {
    if delta_e.is_empty() || delta_e.len() != norms.len() {
        return Err(LobsError::Precondition(format!(
            "need matching non-empty per-layer data, got {} errors and {} norms",
            delta_e.len(),
            norms.len()
        )));
    }
    // Horner-style: rhs_L = √δE^L, rhs_k = √δE^k * S_k accumulated backwards.
    let mut scale = 1.0;
    let mut total = 0.0;
    for l in (0..delta_e.len()).rev() {
        total += scale * delta_e[l].sqrt();
        scale *= norms[l];
    }
    Ok(total)
}

/// `Π_{k=l+1}^{L} ||Θ̂_k||_F` for each layer `l` (1 for the last).
pub fn scale_factors(norms: &[f64]) -> Vec<f64> {
    let mut out = vec![1.0; norms.len()];
    for l in (0..norms.len().saturating_sub(1)).rev() {
        out[l] = out[l + 1] * norms[l + 1];
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeOutputError {
    /// `√δE^1 / ||(1/n) Y^1||_F`.
    pub estimate: f64,
    /// `||Ỹ^L - Y^L||_F / ||Y^L||_F`.
    pub measured: f64,
}

/// Estimated and measured relative error of the final output.
pub fn relative_output_error(
    original: &Network,
    pruned: &Network,
    probe: ArrayView2<f64>,
    delta_e1: f64,
) -> Result<RelativeOutputError> {
    check_topology(original, pruned)?;
    let a = original.forward(probe)?;
    let b = pruned.forward(probe)?;
    let n = probe.ncols() as f64;
    let y1 = frob(a.outputs[0].view()) / n;
    let yl = a.outputs.last().expect("non-empty network");
    let yl_norm = frob(yl.view());
    if y1 == 0.0 || yl_norm == 0.0 {
        return Err(LobsError::Degenerate("zero-norm layer output".into()));
    }
    Ok(RelativeOutputError {
        estimate: delta_e1.sqrt() / y1,
        measured: sq_dist(yl.view(), b.outputs.last().unwrap().view()).sqrt() / yl_norm,
    })
}

fn frob(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerBound {
    pub layer_index: usize,
    /// `E(Ẑ^l)` with the pruned layer fed the original inputs.
    pub delta_e: f64,
    pub epsilon: f64,
    pub sqrt_delta_e: f64,
    pub frobenius_norm: f64,
    pub scale_factor: f64,
    /// `ε̃^l`.
    pub accumulated: f64,
    /// `||Ỹ^l - Ŷ^l||_F` and its bound `√n ||Θ̂_l||_F ε̃^{l-1}`; `None` for the first layer.
    pub step: Option<(f64, f64)>,
}

impl LayerBound {
    pub fn layer_bound_holds(&self) -> bool {
        self.epsilon <= self.sqrt_delta_e + BOUND_TOLERANCE
    }

    pub fn step_holds(&self) -> bool {
        self.step.is_none_or(|(lhs, rhs)| lhs <= rhs + BOUND_TOLERANCE)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub layers: Vec<LayerBound>,
    pub accumulated: f64,
    pub network_bound: f64,
    pub xi_r: RelativeOutputError,
    /// The norm-based propagation argument only covers dense layers.
    pub all_dense: bool,
}

impl BoundReport {
    /// Measures every layer of `pruned` against `original` on the probe inputs.
    pub fn measure(original: &Network, pruned: &Network, probe: ArrayView2<f64>) -> Result<Self> {
        check_topology(original, pruned)?;
        let n = probe.ncols();
        if n == 0 {
            return Err(LobsError::Precondition("probe set is empty".into()));
        }
        let orig = original.forward(probe)?;
        let acc = pruned.forward(probe)?;
        let norms: Vec<f64> = pruned.layers().iter().map(Layer::frobenius_norm).collect();
        let scales = scale_factors(&norms);
        let sqrt_n = (n as f64).sqrt();
        let mut layers = Vec::with_capacity(pruned.num_layers());
        for (l, layer) in pruned.layers().iter().enumerate() {
            let input = if l == 0 { probe } else { orig.outputs[l - 1].view() };
            let z_hat = layer.pre_activation(input, l)?;
            let (delta_e, epsilon) = layer_error(orig.pre_activations[l].view(), z_hat.view(), layer.activation())?;
            let accumulated = (sq_dist(orig.outputs[l].view(), acc.outputs[l].view()) / n as f64).sqrt();
            let step = if l == 0 {
                None
            } else {
                let y_hat: Array2<f64> = layer.activation().apply_array(&z_hat);
                let lhs = sq_dist(acc.outputs[l].view(), y_hat.view()).sqrt();
                let prev: &LayerBound = &layers[l - 1];
                Some((lhs, sqrt_n * norms[l] * prev.accumulated))
            };
            layers.push(LayerBound {
                layer_index: l,
                delta_e,
                epsilon,
                sqrt_delta_e: delta_e.sqrt(),
                frobenius_norm: norms[l],
                scale_factor: scales[l],
                accumulated,
                step,
            });
        }
        let delta: Vec<f64> = layers.iter().map(|b| b.delta_e).collect();
        let rhs = network_bound(&delta, &norms)?;
        let xi_r = match relative_output_error(original, pruned, probe, delta[0]) {
            Ok(x) => x,
            Err(LobsError::Degenerate(_)) => RelativeOutputError {
                estimate: f64::NAN,
                measured: f64::NAN,
            },
            Err(e) => return Err(e),
        };
        Ok(BoundReport {
            accumulated: layers.last().map_or(0.0, |b| b.accumulated),
            layers,
            network_bound: rhs,
            xi_r,
            all_dense: !pruned.layers().iter().any(Layer::is_conv),
        })
    }

    pub fn layer_bound_holds(&self) -> bool {
        self.layers.iter().all(LayerBound::layer_bound_holds)
    }

    /// `None` when the net has conv layers, where the check does not apply.
    pub fn network_bound_holds(&self) -> Option<bool> {
        self.all_dense
            .then_some(self.accumulated <= self.network_bound + BOUND_TOLERANCE)
    }

    pub fn steps_hold(&self) -> Option<bool> {
        self.all_dense.then(|| self.layers.iter().all(LayerBound::step_holds))
    }

    pub fn summary(&self) -> String {
        let verdict = match self.network_bound_holds() {
            Some(true) => "holds",
            Some(false) => "VIOLATED",
            None => "n/a (conv layers)",
        };
        format!(
            "accumulated error {:.6e} vs bound {:.6e}: {verdict}; xi_r estimate {:.4e}, measured {:.4e}",
            self.accumulated, self.network_bound, self.xi_r.estimate, self.xi_r.measured
        )
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "layer,delta_e,epsilon,sqrt_delta_e,frobenius_norm,scale_factor,accumulated_error,step_lhs,step_rhs,layer_bound_holds"
        )?;
        for b in &self.layers {
            let (lhs, rhs) = b
                .step
                .map_or((String::new(), String::new()), |(a, c)| (a.to_string(), c.to_string()));
            writeln!(
                out,
                "{},{},{},{},{},{},{},{lhs},{rhs},{}",
                b.layer_index,
                b.delta_e,
                b.epsilon,
                b.sqrt_delta_e,
                b.frobenius_norm,
                b.scale_factor,
                b.accumulated,
                b.layer_bound_holds()
            )?;
        }
        writeln!(out, "# {}", self.summary())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| LobsError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| LobsError::io(path, e))
    }
}
