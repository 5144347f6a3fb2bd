use ndarray::{Array2, ArrayView2};

use super::data::Dataset;
use super::layer::{append_ones_row, LayerKind};
use super::network::Network;
use crate::error::{LobsError, Result};
use crate::hessian::patches::extract_patches_sampled;

/// Default number of sampled patch positions per probe sample for conv layers.
pub const DEFAULT_CONV_POSITIONS: usize = 20;

/// Inputs and pre-activations of one layer over a probe set.
///
/// `inputs` carries the trailing ones row, so `pre_activations == weights^T inputs`
/// for the weights the snapshot was taken with. For convolutions each column is
/// a patch rather than a sample.
#[derive(Clone, Debug)]
pub struct LayerSnapshot {
    pub layer_index: usize,
    pub inputs: Array2<f64>,
    pub pre_activations: Array2<f64>,
}

impl LayerSnapshot {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.ncols() == 0
    }

    pub fn input_view(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SnapshotOptions {
    /// Patch positions kept per sample for conv layers.
    pub conv_positions: usize,
    pub seed: u64,
}

impl Default for SnapshotOptions {
    fn default() -> Self {
        SnapshotOptions {
            conv_positions: DEFAULT_CONV_POSITIONS,
            seed: 0,
        }
    }
}

pub fn capture_snapshots(net: &Network, probe: &Dataset) -> Result<Vec<LayerSnapshot>> {
    capture_snapshots_with(net, probe, &SnapshotOptions::default())
}

/// One snapshot per layer, taken from the network as it is now.
pub fn capture_snapshots_with(net: &Network, probe: &Dataset, options: &SnapshotOptions) -> Result<Vec<LayerSnapshot>> {
    if probe.is_empty() {
        return Err(LobsError::Precondition("probe set is empty".into()));
    }
    let trace = net.forward(probe.inputs())?;
    let mut out = Vec::with_capacity(net.num_layers());
    for (l, layer) in net.layers().iter().enumerate() {
        let input = if l == 0 { probe.inputs() } else { trace.outputs[l - 1].view() };
        let snap = match layer.kind() {
            LayerKind::Dense => LayerSnapshot {
                layer_index: l,
                inputs: append_ones_row(input),
                pre_activations: trace.pre_activations[l].clone(),
            },
            LayerKind::Conv(g) => {
                let patches = extract_patches_sampled(g, input, options.conv_positions, options.seed.wrapping_add(l as u64))?;
                let pre = layer.lowered_pre_activation(&patches.columns);
                LayerSnapshot {
                    layer_index: l,
                    inputs: patches.columns,
                    pre_activations: pre,
                }
            }
        };
        out.push(snap);
    }
    Ok(out)
}

/// Snapshot of a single layer from explicit layer inputs (no bias row).
pub fn snapshot_from_inputs(net: &Network, layer: usize, inputs: ArrayView2<f64>) -> Result<LayerSnapshot> {
    let lyr = net.layer(layer);
    let lowered = lyr.lower(inputs, layer)?;
    let pre = lyr.lowered_pre_activation(&lowered);
    Ok(LayerSnapshot {
        layer_index: layer,
        inputs: lowered,
        pre_activations: pre,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Split;

    fn probe(d: usize, n: usize) -> Dataset {
        let x = Array2::from_shape_fn((d, n), |(i, j)| ((i * 5 + j * 3) % 7) as f64 / 3.0 - 1.0);
        Dataset::new(x, vec![0; n], 1, Split::Probe).unwrap()
    }

    #[test]
    fn chains_layers() {
        let net = Network::mlp(&[4, 3, 2], 1).unwrap();
        let snaps = capture_snapshots(&net, &probe(4, 3)).unwrap();
        assert_eq!(snaps.len(), 2);
        let y1 = snaps[0].pre_activations.mapv(|v| v.max(0.0));
        assert_eq!(snaps[1].inputs.slice(ndarray::s![..3, ..]), y1);
        assert!(snaps[1].inputs.row(3).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shapes() {
        let net = Network::mlp(&[10, 5, 2], 1).unwrap();
        let snaps = capture_snapshots(&net, &probe(10, 100)).unwrap();
        assert_eq!(snaps[0].inputs.dim(), (11, 100));
        assert_eq!(snaps[0].pre_activations.dim(), (5, 100));
    }

    #[test]
    fn empty_probe_rejected() {
        // Dataset forbids empty sets, so the precondition lives in the type;
        // forward-incompatible probes still error.
        let net = Network::mlp(&[3, 2], 1).unwrap();
        assert!(capture_snapshots(&net, &probe(4, 2)).is_err());
    }
}
