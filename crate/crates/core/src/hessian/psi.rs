use ndarray::{s, Array2, ArrayView2};

use crate::error::{LobsError, Result};
use crate::net::LayerSnapshot;
use crate::par;

/// Columns per partial product. Fixed so the reduction order never depends
/// on the thread count.
const CHUNK: usize = 256;

/// `(1/n) Σ_j y_j y_j^T` over the columns of a layer input.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiMatrix {
    pub layer_index: usize,
    pub psi: Array2<f64>,
    pub sample_count: usize,
}

pub fn accumulate_psi(snapshot: &LayerSnapshot) -> Result<PsiMatrix> {
    accumulate_psi_columns(snapshot.inputs.view(), snapshot.layer_index)
}

/// Chunked accumulation; partial sums are combined in column order.
pub fn accumulate_psi_columns(columns: ArrayView2<f64>, layer_index: usize) -> Result<PsiMatrix> {
    let (m, n) = columns.dim();
    if n == 0 || m == 0 {
        return Err(LobsError::Precondition("cannot accumulate Ψ from an empty snapshot".into()));
    }
    let chunks = n.div_ceil(CHUNK);
    let partials = par::map_indexed(chunks, |c| {
        let block = columns.slice(s![.., c * CHUNK..((c + 1) * CHUNK).min(n)]);
        block.dot(&block.t())
    });
    let mut psi = Array2::zeros((m, m));
    for p in &partials {
        psi += p;
    }
    psi /= n as f64;
    // Exact symmetry; the gemm kernel may round mirrored entries differently.
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (psi[[i, j]] + psi[[j, i]]);
            psi[[i, j]] = v;
            psi[[j, i]] = v;
        }
    }
    Ok(PsiMatrix {
        layer_index,
        psi,
        sample_count: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_outer_product() {
        let y = array![[1.0], [0.0]];
        let p = accumulate_psi_columns(y.view(), 0).unwrap();
        assert_eq!(p.psi, array![[1.0, 0.0], [0.0, 0.0]]);
        assert_eq!(p.sample_count, 1);
    }

    #[test]
    fn orthonormal_average() {
        let y = array![[1.0, 0.0], [0.0, 1.0]];
        let p = accumulate_psi_columns(y.view(), 0).unwrap();
        assert_eq!(p.psi, array![[0.5, 0.0], [0.0, 0.5]]);
    }

    #[test]
    fn empty_rejected() {
        assert!(accumulate_psi_columns(Array2::<f64>::zeros((3, 0)).view(), 0).is_err());
    }
}
