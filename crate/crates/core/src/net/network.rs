use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::Dataset;
use super::layer::{Activation, ConvGeometry, Layer, LayerKind};
use crate::error::{LobsError, Result};
use crate::par;

/// Samples per chunk when evaluating a whole dataset.
const EVAL_CHUNK: usize = 500;

/// Feed-forward network of dense and convolutional layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
}

/// Per-layer pre-activations `Z^l` and outputs `Y^l = σ(Z^l)`, one column per sample.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub pre_activations: Vec<Array2<f64>>,
    pub outputs: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Array2<f64> {
        self.pre_activations.last().expect("network has layers")
    }
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(LobsError::Topology("network needs at least one layer".into()));
        }
        let mut width = input_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.input_len() != width {
                return Err(LobsError::dim(
                    l,
                    format!("layer expects {} inputs but receives {}", layer.input_len(), width),
                ));
            }
            width = layer.output_len();
        }
        Ok(Network { input_dim, layers })
    }

    /// Fully-connected ReLU network; `sizes` starts with the input width.
    pub fn mlp(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(LobsError::Topology("mlp needs an input and an output size".into()));
        }
        let mut builder = NetworkBuilder::new((sizes[0], 1, 1));
        for &units in &sizes[1..] {
            builder = builder.dense(units);
        }
        builder.build(seed)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> &Layer {
        &self.layers[index]
    }

    pub fn layer_mut(&mut self, index: usize) -> &mut Layer {
        &mut self.layers[index]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::output_len).unwrap_or(self.input_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn active_count(&self) -> usize {
        self.layers.iter().map(Layer::active_count).sum()
    }

    /// Preserved / original parameter count.
    pub fn compression_ratio(&self) -> f64 {
        self.active_count() as f64 / self.param_count() as f64
    }

    /// True when both nets have identical layer kinds, shapes and activations.
    pub fn same_topology(&self, other: &Network) -> bool {
        self.input_dim == other.input_dim
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.kind == b.kind && a.activation == b.activation && a.weights.dim() == b.weights.dim()
            })
    }

    fn check_batch(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.nrows() != self.input_dim {
            return Err(LobsError::dim(
                0,
                format!("batch has {} rows, network input is {}", batch.nrows(), self.input_dim),
            ));
        }
        Ok(())
    }

    /// Forward pass keeping every intermediate. `batch` is `input_dim x n`.
    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<ForwardTrace> {
        self.check_batch(&batch)?;
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { batch } else { outputs[l - 1].view() };
            let z = layer.pre_activation(input, l)?;
            outputs.push(layer.activation.apply_array(&z));
            pre_activations.push(z);
        }
        Ok(ForwardTrace {
            pre_activations,
            outputs,
        })
    }

    /// Final-layer pre-activations only.
    pub fn logits(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&batch)?;
        let mut current: Option<Array2<f64>> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = current.as_ref().map(|a| a.view()).unwrap_or(batch);
            let z = layer.pre_activation(input, l)?;
            current = Some(if l + 1 == self.layers.len() {
                z
            } else {
                layer.activation.apply_array(&z)
            });
        }
        Ok(current.expect("network has layers"))
    }

    /// Predicted class per column of `batch`.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok(logits.axis_iter(Axis(1)).map(|col| argmax(col.iter().copied())).collect())
    }

    /// Fraction of correctly classified samples.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let n = data.len();
        let chunks = n.div_ceil(EVAL_CHUNK);
        let correct = par::map_indexed(chunks, |c| -> Result<usize> {
            let lo = c * EVAL_CHUNK;
            let hi = (lo + EVAL_CHUNK).min(n);
            let preds = self.predict(data.inputs().slice(s![.., lo..hi]))?;
            Ok(preds
                .iter()
                .zip(&data.labels()[lo..hi])
                .filter(|(p, y)| p == y)
                .count())
        });
        let mut total = 0;
        for c in correct {
            total += c?;
        }
        Ok(total as f64 / n as f64)
    }

    /// Test error in `[0, 1]`.
    pub fn error_rate(&self, data: &Dataset) -> Result<f64> {
        Ok(1.0 - self.accuracy(data)?)
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Builds a network layer by layer from an input volume `(channels, height, width)`.
///
/// Hidden layers use ReLU; the final layer is linear (logits for softmax).
#[derive(Clone, Debug)]
pub struct NetworkBuilder {
    input: (usize, usize, usize),
    specs: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug)]
enum LayerSpec {
    Dense(usize),
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

impl NetworkBuilder {
    pub fn new(input: (usize, usize, usize)) -> Self {
        NetworkBuilder {
            input,
            specs: Vec::new(),
        }
    }

    pub fn dense(mut self, units: usize) -> Self {
        self.specs.push(LayerSpec::Dense(units));
        self
    }

    pub fn conv(mut self, channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        self.specs.push(LayerSpec::Conv {
            channels,
            kernel,
            stride,
            padding,
        });
        self
    }

    pub fn build(self, seed: u64) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = self.input;
        let input_dim = c * h * w;
        let mut volume = Some(self.input);
        let mut width = input_dim;
        let mut layers = Vec::with_capacity(self.specs.len());
        let last = self.specs.len().saturating_sub(1);
        for (l, spec) in self.specs.iter().enumerate() {
            let act = if l == last { Activation::Identity } else { Activation::Relu };
            let layer = match *spec {
                LayerSpec::Dense(units) => {
                    let layer = Layer::random(LayerKind::Dense, width, units, act, &mut rng)?;
                    volume = None;
                    layer
                }
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let vol = volume.ok_or_else(|| {
                        LobsError::Topology(format!("conv layer {l} follows a dense layer"))
                    })?;
                    let g = ConvGeometry::new(vol, channels, (kernel, kernel), (stride, stride), (padding, padding))
                        .map_err(|e| match e {
                            LobsError::Dimension { detail, .. } => LobsError::dim(l, detail),
                            other => other,
                        })?;
                    volume = Some((channels, g.out_height(), g.out_width()));
                    Layer::random(LayerKind::Conv(g), g.patch_len(), channels, act, &mut rng)?
                }
            };
            width = layer.output_len();
            layers.push(layer);
        }
        Network::new(input_dim, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_relu_layer() {
        let w = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let net = Network::new(2, vec![Layer::dense(w, Activation::Relu).unwrap()]).unwrap();
        let trace = net.forward(array![[1.0], [-1.0]].view()).unwrap();
        assert_eq!(trace.pre_activations[0], array![[1.0], [-1.0]]);
        assert_eq!(trace.outputs[0], array![[1.0], [0.0]]);
    }

    #[test]
    fn fully_masked_network_outputs_zero() {
        let mut net = Network::mlp(&[4, 3, 2], 7).unwrap();
        for l in 0..net.num_layers() {
            let layer = net.layer_mut(l);
            layer.mask.fill(false);
            layer.apply_mask();
        }
        let x = Array2::from_shape_fn((4, 5), |(i, j)| i as f64 - j as f64);
        let trace = net.forward(x.view()).unwrap();
        assert!(trace.outputs.last().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_reports_layer() {
        let net = Network::mlp(&[4, 3, 2], 1).unwrap();
        let err = net.forward(Array2::zeros((5, 1)).view()).unwrap_err();
        assert!(matches!(err, LobsError::Dimension { layer: 0, .. }));
        let bad = Network::new(4, vec![
            Layer::dense(Array2::zeros((5, 3)), Activation::Relu).unwrap(),
            Layer::dense(Array2::zeros((5, 2)), Activation::Identity).unwrap(),
        ]);
        assert!(matches!(bad, Err(LobsError::Dimension { layer: 1, .. })));
    }

    #[test]
    fn builder_chains_conv_and_dense() {
        let net = NetworkBuilder::new((1, 28, 28))
            .conv(6, 5, 2, 0)
            .conv(12, 5, 2, 0)
            .dense(10)
            .build(3)
            .unwrap();
        assert_eq!(net.layer(0).output_len(), 6 * 12 * 12);
        assert_eq!(net.layer(1).output_len(), 12 * 4 * 4);
        assert_eq!(net.layer(2).rows(), 12 * 16 + 1);
        assert_eq!(net.layer(2).activation(), Activation::Identity);
        assert!(NetworkBuilder::new((1, 28, 28)).dense(5).conv(2, 3, 1, 0).build(0).is_err());
    }

    #[test]
    fn init_is_seeded_and_bias_zero() {
        let a = Network::mlp(&[10, 5, 3], 11).unwrap();
        let b = Network::mlp(&[10, 5, 3], 11).unwrap();
        assert_eq!(a, b);
        assert!(a.layer(0).bias().iter().all(|&v| v == 0.0));
        let limit = (6.0f64 / 15.0).sqrt();
        assert!(a.layer(0).weights().iter().all(|v| v.abs() <= limit));
    }
}
