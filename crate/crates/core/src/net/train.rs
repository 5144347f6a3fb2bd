//! Mini-batch SGD with softmax cross-entropy and mask-aware updates.

use ndarray::{Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::layer::Activation;
use super::network::Network;
use crate::error::{LobsError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    #[default]
    SoftmaxCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Heavy-ball momentum; `0.0` gives plain SGD.
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            iterations: 1000,
            seed: 0,
            loss: Loss::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    pub losses: Vec<f64>,
}

/// Trains a copy of `net` for `config.iterations` steps.
pub fn train_sgd(net: &Network, data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(net.clone(), config.clone())?;
    let mut losses = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        losses.push(trainer.step(data)?);
    }
    Ok(TrainOutcome {
        net: trainer.into_net(),
        losses,
    })
}

/// Stateful SGD driver, used directly when the caller needs to observe
/// the network between steps (retraining traces, recovery detection).
pub struct Trainer {
    net: Network,
    velocity: Vec<Array2<f64>>,
    config: TrainConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    iteration: usize,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !config.lr.is_finite() {
            return Err(LobsError::Precondition(format!("learning rate must be positive, got {}", config.lr)));
        }
        if config.batch_size == 0 {
            return Err(LobsError::Precondition("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(LobsError::Precondition(format!("momentum must lie in [0, 1), got {}", config.momentum)));
        }
        let velocity = net.layers().iter().map(|l| Array2::zeros(l.weights().raw_dim())).collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            net,
            velocity,
            config,
            rng,
            order: Vec::new(),
            cursor: 0,
            iteration: 0,
        })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn into_net(self) -> Network {
        self.net
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size.min(n) {
            if self.cursor >= self.order.len() || self.order.len() != n {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One SGD step on a freshly drawn mini-batch; returns the batch loss.
    pub fn step(&mut self, data: &Dataset) -> Result<f64> {
        if data.dim() != self.net.input_dim() {
            return Err(LobsError::dim(0, "dataset dimension does not match the network"));
        }
        let idx = self.next_batch(data.len());
        let (x, y) = data.gather(&idx);
        let (loss, grads) = loss_and_gradients(&self.net, &x, &y)?;
        if !loss.is_finite() {
            return Err(LobsError::Divergence {
                iteration: self.iteration,
                loss,
            });
        }
        let (lr, mu) = (self.config.lr, self.config.momentum);
        for (l, grad) in grads.into_iter().enumerate() {
            let layer = self.net.layer_mut(l);
            Zip::from(&mut layer.weights)
                .and(&mut self.velocity[l])
                .and(&grad)
                .and(&layer.mask)
                .for_each(|w, v, &g, &m| {
                    if m {
                        *v = mu * *v - lr * g;
                        *w += *v;
                    }
                });
        }
        self.iteration += 1;
        Ok(loss)
    }
}

/// Mean softmax cross-entropy over the batch and its gradient per layer.
pub fn loss_and_gradients(net: &Network, x: &Array2<f64>, labels: &[usize]) -> Result<(f64, Vec<Array2<f64>>)> {
    let n = x.ncols();
    let layers = net.layers();
    let mut lowered = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut current = x.clone();
    for (l, layer) in layers.iter().enumerate() {
        let u = layer.lower(current.view(), l)?;
        let z = layer.fold_output(layer.lowered_pre_activation(&u), n);
        current = layer.activation().apply_array(&z);
        lowered.push(u);
        pre.push(z);
    }

    let logits = pre.last().expect("network has layers");
    let (loss, mut dz) = softmax_cross_entropy(logits, labels);

    let mut grads = vec![Array2::zeros((0, 0)); layers.len()];
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let dz_low = layer.unfold_output(dz.view());
        grads[l] = lowered[l].dot(&dz_low.t());
        if l == 0 {
            break;
        }
        let du = layer.weights().dot(&dz_low);
        let mut dy = layer.lowered_input_grad(du.view(), n);
        match layers[l - 1].activation() {
            Activation::Relu => Zip::from(&mut dy).and(&pre[l - 1]).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Identity => {}
        }
        dz = dy;
    }
    Ok((loss, grads))
}

fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.ncols();
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (j, mut col) in grad.axis_iter_mut(Axis(1)).enumerate() {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = col.sum();
        col.mapv_inplace(|v| v / sum);
        let p = col[labels[j]];
        // NaN falls through to the last arm so divergence stays visible.
        loss -= if p > 0.0 {
            p.ln()
        } else if p == 0.0 {
            f64::MIN_POSITIVE.ln()
        } else {
            f64::NAN
        };
        col[labels[j]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n as f64);
    (loss / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Layer, NetworkBuilder, Split};
    use ndarray::s;

    fn numeric_grad(net: &Network, x: &Array2<f64>, y: &[usize], l: usize, r: usize, c: usize) -> f64 {
        let h = 1e-6;
        let mut plus = net.clone();
        plus.layer_mut(l).weights[[r, c]] += h;
        let mut minus = net.clone();
        minus.layer_mut(l).weights[[r, c]] -= h;
        let fp = loss_and_gradients(&plus, x, y).unwrap().0;
        let fm = loss_and_gradients(&minus, x, y).unwrap().0;
        (fp - fm) / (2.0 * h)
    }

    #[test]
    fn backprop_matches_finite_differences_dense() {
        let net = Network::mlp(&[5, 4, 3], 9).unwrap();
        let x = Array2::from_shape_fn((5, 6), |(i, j)| ((i * 7 + j * 3) % 5) as f64 / 4.0 - 0.3);
        let y = vec![0, 1, 2, 1, 0, 2];
        let (_, grads) = loss_and_gradients(&net, &x, &y).unwrap();
        for l in 0..2 {
            let (rows, cols) = grads[l].dim();
            for r in 0..rows {
                for c in 0..cols {
                    let fd = numeric_grad(&net, &x, &y, l, r, c);
                    assert!((fd - grads[l][[r, c]]).abs() < 1e-6, "layer {l} ({r},{c}): {fd} vs {}", grads[l][[r, c]]);
                }
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences_conv() {
        let mut net = NetworkBuilder::new((2, 6, 6)).conv(3, 3, 2, 1).conv(2, 2, 1, 0).dense(3).build(4).unwrap();
        // nonzero biases so ReLU kinks are away from the probe points
        for l in 0..net.num_layers() {
            let rows = net.layer(l).rows();
            net.layer_mut(l).weights.slice_mut(s![rows - 1, ..]).fill(0.05);
        }
        let x = Array2::from_shape_fn((72, 3), |(i, j)| ((i * 13 + j * 5) % 11) as f64 / 10.0 - 0.4);
        let y = vec![2, 0, 1];
        let (_, grads) = loss_and_gradients(&net, &x, &y).unwrap();
        for l in 0..net.num_layers() {
            let (rows, cols) = grads[l].dim();
            for r in (0..rows).step_by(3) {
                for c in 0..cols {
                    let fd = numeric_grad(&net, &x, &y, l, r, c);
                    assert!((fd - grads[l][[r, c]]).abs() < 1e-6, "layer {l} ({r},{c}): {fd} vs {}", grads[l][[r, c]]);
                }
            }
        }
    }

    fn blobs() -> Dataset {
        // two separable clusters in 2-D
        let n = 200;
        let x = Array2::from_shape_fn((2, n), |(i, j)| {
            let cls = (j % 2) as f64;
            let jitter = (((j * 37 + i * 11) % 17) as f64 / 17.0 - 0.5) * 0.8;
            (2.0 * cls - 1.0) * 1.5 + jitter
        });
        let y = (0..n).map(|j| j % 2).collect();
        Dataset::new(x, y, 2, Split::Train).unwrap()
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let data = blobs();
        let net = Network::mlp(&[2, 2], 1).unwrap();
        let cfg = TrainConfig {
            lr: 0.1,
            momentum: 0.0,
            batch_size: 32,
            iterations: 500,
            seed: 5,
            ..Default::default()
        };
        let out = train_sgd(&net, &data, &cfg).unwrap();
        assert!(out.net.accuracy(&data).unwrap() >= 0.99);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let net = Network::mlp(&[2, 3, 2], 8).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let out = train_sgd(&net, &blobs(), &cfg).unwrap();
        assert_eq!(out.net, net);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn masked_weights_stay_zero_and_runs_are_deterministic() {
        let mut net = Network::mlp(&[2, 4, 2], 2).unwrap();
        for (r, c) in [(0, 0), (1, 3), (2, 1)] {
            net.layer_mut(0).prune_entry(r, c);
        }
        let cfg = TrainConfig {
            iterations: 50,
            batch_size: 16,
            seed: 3,
            ..Default::default()
        };
        let a = train_sgd(&net, &blobs(), &cfg).unwrap();
        let b = train_sgd(&net, &blobs(), &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        for (r, c) in [(0, 0), (1, 3), (2, 1)] {
            assert_eq!(a.net.layer(0).weights()[[r, c]], 0.0);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let data = blobs();
        let mut w = Array2::zeros((3, 2));
        w[[0, 0]] = f64::INFINITY;
        w[[0, 1]] = f64::INFINITY;
        let net = Network::new(2, vec![Layer::dense(w, Activation::Identity).unwrap()]).unwrap();
        let cfg = TrainConfig {
            iterations: 20,
            ..Default::default()
        };
        match train_sgd(&net, &data, &cfg) {
            Err(LobsError::Divergence { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.losses)),
        }
    }

    #[test]
    fn rejects_bad_config() {
        let net = Network::mlp(&[2, 2], 0).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(Trainer::new(net, cfg).is_err());
    }
}
