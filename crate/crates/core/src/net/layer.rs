//! Dense and convolutional layers with folded biases and pruning masks.
//!
//! Every layer keeps its parameters as a `(fan_in + 1) x units` matrix whose
//! last row holds the bias. Column `i` is the weight vector of output unit
//! (or output channel) `i`, so a layer computes `Z = W^T U` where `U` is its
//! lowered input: the raw input with a row of ones appended for dense layers,
//! or the patch matrix for convolutions.

use ndarray::{s, Array2, Array4, ArrayView2, Zip};
use rand::Rng;

use crate::error::{LobsError, Result};
use crate::hessian::patches;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    pub fn apply_array(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Geometry of a 2-D convolution over a `(channels, height, width)` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(
        input: (usize, usize, usize),
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let geom = ConvGeometry {
            in_channels: input.0,
            in_height: input.1,
            in_width: input.2,
            out_channels,
            kernel,
            stride,
            padding,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(LobsError::dim(0, detail));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("convolution needs at least one input and output channel".into());
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return bad("stride must be positive".into());
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad("kernel must be non-empty".into());
        }
        let padded_h = self.in_height + 2 * self.padding.0;
        let padded_w = self.in_width + 2 * self.padding.1;
        if self.kernel.0 > padded_h || self.kernel.1 > padded_w {
            return bad(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kernel.0, self.kernel.1, padded_h, padded_w
            ));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1
    }

    /// Number of sliding-window positions per sample.
    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Receptive-field size, excluding the bias entry.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.positions()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Dense,
    Conv(ConvGeometry),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub(crate) kind: LayerKind,
    pub(crate) weights: Array2<f64>,
    pub(crate) mask: Array2<bool>,
    pub(crate) activation: Activation,
}

impl Layer {
    /// Dense layer from a `(fan_in + 1) x units` matrix; the last row is the bias.
    pub fn dense(weights: Array2<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() < 2 || weights.ncols() == 0 {
            return Err(LobsError::dim(
                0,
                format!("dense weights must be at least 2x1, got {:?}", weights.dim()),
            ));
        }
        let mask = Array2::from_elem(weights.raw_dim(), true);
        Ok(Layer {
            kind: LayerKind::Dense,
            weights,
            mask,
            activation,
        })
    }

    /// Convolution from a `(patch_len + 1) x out_channels` matrix.
    pub fn conv(geometry: ConvGeometry, weights: Array2<f64>, activation: Activation) -> Result<Self> {
        geometry.validate()?;
        if weights.dim() != (geometry.patch_len() + 1, geometry.out_channels) {
            return Err(LobsError::dim(
                0,
                format!(
                    "conv weights {:?} do not match geometry ({}, {})",
                    weights.dim(),
                    geometry.patch_len() + 1,
                    geometry.out_channels
                ),
            ));
        }
        let mask = Array2::from_elem(weights.raw_dim(), true);
        Ok(Layer {
            kind: LayerKind::Conv(geometry),
            weights,
            mask,
            activation,
        })
    }

    /// Conv layer from a `(out, in, kH, kW)` filter bank and per-channel bias.
    pub fn conv_from_filters(
        geometry: ConvGeometry,
        filters: &Array4<f64>,
        bias: &[f64],
        activation: Activation,
    ) -> Result<Self> {
        let (kh, kw) = geometry.kernel;
        let expected = (geometry.out_channels, geometry.in_channels, kh, kw);
        if filters.dim() != expected || bias.len() != geometry.out_channels {
            return Err(LobsError::dim(
                0,
                format!("filter bank {:?} does not match geometry {:?}", filters.dim(), expected),
            ));
        }
        let mut weights = Array2::zeros((geometry.patch_len() + 1, geometry.out_channels));
        for ((o, c, y, x), &v) in filters.indexed_iter() {
            weights[[c * kh * kw + y * kw + x, o]] = v;
        }
        weights.row_mut(geometry.patch_len()).assign(&ndarray::aview1(bias));
        Layer::conv(geometry, weights, activation)
    }

    /// Glorot-uniform weights, zero bias.
    pub fn random(kind: LayerKind, fan_in: usize, units: usize, activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        let fan_out = match &kind {
            LayerKind::Dense => units,
            LayerKind::Conv(g) => units * g.kernel.0 * g.kernel.1,
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut weights = Array2::zeros((fan_in + 1, units));
        for v in weights.slice_mut(s![..fan_in, ..]).iter_mut() {
            *v = rng.gen_range(-limit..limit);
        }
        match kind {
            LayerKind::Dense => Layer::dense(weights, activation),
            LayerKind::Conv(g) => Layer::conv(g, weights, activation),
        }
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    /// Rows of the parameter matrix: fan-in plus the bias row.
    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn units(&self) -> usize {
        self.weights.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn input_len(&self) -> usize {
        match &self.kind {
            LayerKind::Dense => self.rows() - 1,
            LayerKind::Conv(g) => g.input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        match &self.kind {
            LayerKind::Dense => self.units(),
            LayerKind::Conv(g) => g.output_len(),
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv(_))
    }

    /// Row and column of the flat (column-major) parameter index `q`.
    #[inline]
    pub fn position(&self, q: usize) -> (usize, usize) {
        (q % self.rows(), q / self.rows())
    }

    #[inline]
    pub fn flat_index(&self, row: usize, col: usize) -> usize {
        col * self.rows() + row
    }

    /// Replaces the weights and re-applies the mask.
    pub fn set_weights(&mut self, weights: Array2<f64>) -> Result<()> {
        if weights.dim() != self.weights.dim() {
            return Err(LobsError::dim(0, "replacement weights have a different shape"));
        }
        self.weights = weights;
        self.apply_mask();
        Ok(())
    }

    /// Zeroes a parameter and removes it from the active set.
    pub fn prune_entry(&mut self, row: usize, col: usize) {
        self.weights[[row, col]] = 0.0;
        self.mask[[row, col]] = false;
    }

    pub(crate) fn apply_mask(&mut self) {
        Zip::from(&mut self.weights)
            .and(&self.mask)
            .for_each(|w, &m| {
                if !m {
                    *w = 0.0;
                }
            });
    }

    /// Filter bank `(out, in, kH, kW)` of a convolution.
    pub fn filters(&self) -> Option<Array4<f64>> {
        let LayerKind::Conv(g) = &self.kind else {
            return None;
        };
        let (kh, kw) = g.kernel;
        Some(Array4::from_shape_fn(
            (g.out_channels, g.in_channels, kh, kw),
            |(o, c, y, x)| self.weights[[c * kh * kw + y * kw + x, o]],
        ))
    }

    pub fn bias(&self) -> ndarray::ArrayView1<'_, f64> {
        self.weights.row(self.rows() - 1)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    fn check_input(&self, input: &ArrayView2<f64>, layer: usize) -> Result<()> {
        if input.nrows() != self.input_len() {
            return Err(LobsError::dim(
                layer,
                format!("expected {} input rows, got {}", self.input_len(), input.nrows()),
            ));
        }
        Ok(())
    }

    /// Lowered input `U`: columns the parameter matrix acts on.
    ///
    /// Dense: input with a ones row appended. Conv: all patch columns, ordered
    /// by sample and then by output position.
    pub fn lower(&self, input: ArrayView2<f64>, layer: usize) -> Result<Array2<f64>> {
        self.check_input(&input, layer)?;
        match &self.kind {
            LayerKind::Dense => Ok(append_ones_row(input)),
            LayerKind::Conv(g) => patches::im2col(g, input),
        }
    }

    /// `W^T U` in lowered layout (units x lowered columns).
    pub fn lowered_pre_activation(&self, lowered: &Array2<f64>) -> Array2<f64> {
        self.weights.t().dot(lowered)
    }

    /// Pre-activation `Z` in the per-sample layout of [`Layer::output_len`] rows.
    pub fn pre_activation(&self, input: ArrayView2<f64>, layer: usize) -> Result<Array2<f64>> {
        let lowered = self.lower(input, layer)?;
        let z = self.lowered_pre_activation(&lowered);
        Ok(self.fold_output(z, input.ncols()))
    }

    /// Converts lowered output (units x n*positions) into per-sample columns.
    pub(crate) fn fold_output(&self, z: Array2<f64>, n: usize) -> Array2<f64> {
        match &self.kind {
            LayerKind::Dense => z,
            LayerKind::Conv(g) => {
                let pos = g.positions();
                let mut out = Array2::zeros((g.output_len(), n));
                for c in 0..g.out_channels {
                    for j in 0..n {
                        let src = z.slice(s![c, j * pos..(j + 1) * pos]);
                        out.slice_mut(s![c * pos..(c + 1) * pos, j]).assign(&src);
                    }
                }
                out
            }
        }
    }

    /// Inverse of [`Layer::fold_output`].
    pub(crate) fn unfold_output(&self, z: ArrayView2<f64>) -> Array2<f64> {
        match &self.kind {
            LayerKind::Dense => z.to_owned(),
            LayerKind::Conv(g) => {
                let pos = g.positions();
                let n = z.ncols();
                let mut out = Array2::zeros((g.out_channels, n * pos));
                for c in 0..g.out_channels {
                    for j in 0..n {
                        let src = z.slice(s![c * pos..(c + 1) * pos, j]);
                        out.slice_mut(s![c, j * pos..(j + 1) * pos]).assign(&src);
                    }
                }
                out
            }
        }
    }

    /// Gradient w.r.t. the layer input given the gradient w.r.t. lowered columns.
    pub(crate) fn lowered_input_grad(&self, d_lowered: ArrayView2<f64>, n: usize) -> Array2<f64> {
        let fan_in = self.rows() - 1;
        let body = d_lowered.slice(s![..fan_in, ..]);
        match &self.kind {
            LayerKind::Dense => body.to_owned(),
            LayerKind::Conv(g) => patches::col2im(g, body, n),
        }
    }
}

pub(crate) fn append_ones_row(input: ArrayView2<f64>) -> Array2<f64> {
    let (d, n) = input.dim();
    let mut out = Array2::ones((d + 1, n));
    out.slice_mut(s![..d, ..]).assign(&input);
    out
}
