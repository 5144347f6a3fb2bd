//! Layer-wise Hessian of the reconstruction error and its inverse.
//!
//! For a layer computing `Z = W^T U`, the error `E = (1/n) ||Ẑ - Z||_F^2` has a
//! Hessian w.r.t. the column-major vectorised parameters that is block
//! diagonal with `units` identical blocks `2Ψ`, where `Ψ = (1/n) Σ u_j u_j^T`.
//! Only `Ψ^{-1}` is ever formed; [`hinv_diag_entry`] and the pruner read
//! `H^{-1}` through it.

pub mod inverse;
pub mod patches;
pub mod psi;

use ndarray::{s, Array2};

pub use inverse::{recursive_inverse_columns, recursive_psi_inverse, PsiInverse, ALPHA_RANGE, DEFAULT_ALPHA};
pub use patches::{extract_patches, extract_patches_sampled, PatchSet};
pub use psi::{accumulate_psi, accumulate_psi_columns, PsiMatrix};

use crate::error::{LobsError, Result};

/// `H = HESSIAN_SCALE * blockdiag(Ψ, ..., Ψ)`.
pub const HESSIAN_SCALE: f64 = 2.0;

/// `[H^{-1}]_{qq}` for flat parameter index `q` of a `rows x units` layer.
///
/// Parameter `q` belongs to output unit `q / rows` and input row `q % rows`;
/// every unit shares the same block, so only the row matters.
pub fn hinv_diag_entry(pinv: &PsiInverse, q: usize, rows: usize, units: usize) -> Result<f64> {
    if pinv.dim() != rows {
        return Err(LobsError::dim(
            pinv.layer_index,
            format!("Ψ^-1 is {0}x{0} but the layer has {rows} rows", pinv.dim()),
        ));
    }
    let len = rows * units;
    if q >= len {
        return Err(LobsError::IndexOutOfRange { index: q, len });
    }
    let r = q % rows;
    Ok(pinv.inv[[r, r]] / HESSIAN_SCALE)
}

/// Materialises `blockdiag(block, ..., block)` with `copies` blocks.
pub fn block_diagonal(block: &Array2<f64>, copies: usize) -> Array2<f64> {
    let m = block.nrows();
    let mut out = Array2::zeros((m * copies, m * copies));
    for b in 0..copies {
        out.slice_mut(s![b * m..(b + 1) * m, b * m..(b + 1) * m]).assign(block);
    }
    out
}

/// Full layer Hessian `H` from Ψ (only sensible for small layers).
pub fn materialize_hessian(psi: &PsiMatrix, units: usize) -> Array2<f64> {
    block_diagonal(&(&psi.psi * HESSIAN_SCALE), units)
}

/// Full layer `H^{-1}` from Ψ^{-1} (only sensible for small layers).
pub fn materialize_hessian_inverse(pinv: &PsiInverse, units: usize) -> Array2<f64> {
    block_diagonal(&(&pinv.inv / HESSIAN_SCALE), units)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pinv(inv: Array2<f64>) -> PsiInverse {
        PsiInverse {
            layer_index: 0,
            inv,
            alpha: DEFAULT_ALPHA,
            sample_count: 1,
        }
    }

    #[test]
    fn block_replication() {
        // Ψ^-1 = diag(4, 6) gives H^-1 = diag(2, 3) in every block
        let p = pinv(array![[4.0, 0.0], [0.0, 6.0]]);
        let got: Vec<f64> = (0..4).map(|q| hinv_diag_entry(&p, q, 2, 2).unwrap()).collect();
        assert_eq!(got, vec![2.0, 3.0, 2.0, 3.0]);
    }

    #[test]
    fn identity_inverse() {
        let p = pinv(Array2::eye(3) * HESSIAN_SCALE);
        for q in 0..12 {
            assert_eq!(hinv_diag_entry(&p, q, 3, 4).unwrap(), 1.0);
        }
    }

    #[test]
    fn out_of_range_and_mismatch() {
        let p = pinv(Array2::eye(2));
        assert!(matches!(
            hinv_diag_entry(&p, 4, 2, 2),
            Err(LobsError::IndexOutOfRange { index: 4, len: 4 })
        ));
        assert!(hinv_diag_entry(&p, 0, 3, 2).is_err());
    }
}
