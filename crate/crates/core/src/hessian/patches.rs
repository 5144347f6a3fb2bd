//! Patch extraction (im2col) so convolutions reduce to dense-layer algebra.

use ndarray::{Array2, ArrayView2, ShapeBuilder};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LobsError, Result};
use crate::net::ConvGeometry;
use crate::par;

/// Receptive-field columns of a convolution input plus where each came from.
#[derive(Clone, Debug)]
pub struct PatchSet {
    /// `(patch_len + 1) x count`; the last row is all ones.
    pub columns: Array2<f64>,
    /// `(sample, position)` of every column.
    pub origin: Vec<(usize, usize)>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }
}

fn check(geom: &ConvGeometry, inputs: &ArrayView2<f64>) -> Result<()> {
    geom.validate()?;
    if inputs.nrows() != geom.input_len() {
        return Err(LobsError::dim(
            0,
            format!("conv input has {} rows, geometry expects {}", inputs.nrows(), geom.input_len()),
        ));
    }
    Ok(())
}

/// Writes the patch at output position `p` of sample column `x` into `out`.
#[inline]
fn fill_patch(geom: &ConvGeometry, x: &[f64], p: usize, out: &mut [f64]) {
    let (kh, kw) = geom.kernel;
    let (h, w) = (geom.in_height as isize, geom.in_width as isize);
    let ow = geom.out_width();
    let oy = (p / ow) as isize * geom.stride.0 as isize - geom.padding.0 as isize;
    let ox = (p % ow) as isize * geom.stride.1 as isize - geom.padding.1 as isize;
    let mut k = 0;
    for c in 0..geom.in_channels {
        let plane = &x[c * geom.in_height * geom.in_width..];
        for dy in 0..kh as isize {
            let y = oy + dy;
            for dx in 0..kw as isize {
                let xx = ox + dx;
                out[k] = if y >= 0 && y < h && xx >= 0 && xx < w {
                    plane[(y * w + xx) as usize]
                } else {
                    0.0
                };
                k += 1;
            }
        }
    }
    out[k] = 1.0;
}

/// Every patch column of every sample, sample-major then position order.
pub(crate) fn im2col(geom: &ConvGeometry, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    check(geom, &inputs)?;
    let n = inputs.ncols();
    let rows = geom.patch_len() + 1;
    let pos = geom.positions();
    let samples: Vec<Vec<f64>> = (0..n).map(|j| inputs.column(j).to_vec()).collect();
    let mut data = vec![0.0; rows * pos * n];
    if n > 0 {
        par::for_each_chunk_mut(&mut data, rows * pos, |j, chunk| {
            for p in 0..pos {
                fill_patch(geom, &samples[j], p, &mut chunk[p * rows..(p + 1) * rows]);
            }
        });
    }
    Ok(Array2::from_shape_vec((rows, n * pos).f(), data).expect("patch buffer size"))
}

/// Scatters patch-column gradients (bias row already removed) back onto inputs.
pub(crate) fn col2im(geom: &ConvGeometry, dcols: ArrayView2<f64>, n: usize) -> Array2<f64> {
    let (kh, kw) = geom.kernel;
    let (h, w) = (geom.in_height as isize, geom.in_width as isize);
    let ow = geom.out_width();
    let pos = geom.positions();
    let len = geom.input_len();
    let mut data = vec![0.0; len * n];
    if n > 0 {
        par::for_each_chunk_mut(&mut data, len, |j, dx| {
            for p in 0..pos {
                let col = dcols.column(j * pos + p);
                let oy = (p / ow) as isize * geom.stride.0 as isize - geom.padding.0 as isize;
                let ox = (p % ow) as isize * geom.stride.1 as isize - geom.padding.1 as isize;
                let mut k = 0;
                for c in 0..geom.in_channels {
                    let base = c * geom.in_height * geom.in_width;
                    for dy in 0..kh as isize {
                        let y = oy + dy;
                        for ddx in 0..kw as isize {
                            let xx = ox + ddx;
                            if y >= 0 && y < h && xx >= 0 && xx < w {
                                dx[base + (y * w + xx) as usize] += col[k];
                            }
                            k += 1;
                        }
                    }
                }
            }
        });
    }
    Array2::from_shape_vec((len, n).f(), data).expect("image buffer size")
}

/// All patches of `inputs` (one column per sample, `C*H*W` rows).
pub fn extract_patches(geom: &ConvGeometry, inputs: ArrayView2<f64>) -> Result<PatchSet> {
    let columns = im2col(geom, inputs)?;
    let pos = geom.positions();
    let origin = (0..inputs.ncols())
        .flat_map(|j| (0..pos).map(move |p| (j, p)))
        .collect();
    Ok(PatchSet { columns, origin })
}

/// Patches at up to `cap` uniformly chosen positions per sample.
///
/// Positions are drawn without replacement from a seeded stream, so the same
/// `(inputs, cap, seed)` always yields the same set. `cap >= positions` keeps
/// every position.
pub fn extract_patches_sampled(
    geom: &ConvGeometry,
    inputs: ArrayView2<f64>,
    cap: usize,
    seed: u64,
) -> Result<PatchSet> {
    check(geom, &inputs)?;
    let pos = geom.positions();
    if cap >= pos {
        return extract_patches(geom, inputs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut origin = Vec::with_capacity(inputs.ncols() * cap);
    for j in 0..inputs.ncols() {
        let mut chosen = sample(&mut rng, pos, cap).into_vec();
        chosen.sort_unstable();
        origin.extend(chosen.into_iter().map(|p| (j, p)));
    }
    let rows = geom.patch_len() + 1;
    let mut data = vec![0.0; rows * origin.len()];
    let samples: Vec<Vec<f64>> = (0..inputs.ncols()).map(|j| inputs.column(j).to_vec()).collect();
    if !origin.is_empty() {
        par::for_each_chunk_mut(&mut data, rows, |i, chunk| {
            let (j, p) = origin[i];
            fill_patch(geom, &samples[j], p, chunk);
        });
    }
    let columns = Array2::from_shape_vec((rows, origin.len()).f(), data).expect("patch buffer size");
    Ok(PatchSet { columns, origin })
}
