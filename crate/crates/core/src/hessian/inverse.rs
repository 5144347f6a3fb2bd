use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{LobsError, Result};
use crate::net::LayerSnapshot;
use crate::par;

pub const ALPHA_RANGE: (f64, f64) = (1e4, 1e8);
pub const DEFAULT_ALPHA: f64 = 1e6;

/// Smallest admissible rank-one denominator.
const MIN_DENOMINATOR: f64 = 1e-300;

/// Inverse (pseudo-inverse for degenerate inputs) of a layer's Ψ block.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiInverse {
    pub layer_index: usize,
    pub inv: Array2<f64>,
    pub alpha: f64,
    pub sample_count: usize,
}

impl PsiInverse {
    /// Block dimension (fan-in plus bias).
    pub fn dim(&self) -> usize {
        self.inv.nrows()
    }
}

pub fn recursive_psi_inverse(snapshot: &LayerSnapshot, alpha: f64) -> Result<PsiInverse> {
    recursive_inverse_columns(snapshot.inputs.view(), alpha, snapshot.layer_index)
}

/// Sherman-Morrison recursion over the columns of `columns`.
///
/// Starts from `alpha * I` and folds in one column per step:
/// `P <- P - (P y)(P y)^T / (n + y^T P y)`, which after all `n` columns is the
/// inverse of `I / alpha + (1/n) Σ y y^T`.
pub fn recursive_inverse_columns(columns: ArrayView2<f64>, alpha: f64, layer_index: usize) -> Result<PsiInverse> {
    if !(ALPHA_RANGE.0..=ALPHA_RANGE.1).contains(&alpha) {
        return Err(LobsError::Precondition(format!(
            "alpha {alpha:e} outside [{:e}, {:e}]",
            ALPHA_RANGE.0, ALPHA_RANGE.1
        )));
    }
    let (m, n) = columns.dim();
    if n == 0 || m == 0 {
        return Err(LobsError::Precondition("cannot invert Ψ from an empty snapshot".into()));
    }
    let scale = n as f64;
    let mut inv = Array2::<f64>::eye(m) * alpha;
    let mut u = Array1::<f64>::zeros(m);
    for j in 0..n {
        let y = columns.column(j);
        let y = y.as_standard_layout();
        {
            let inv_ref = &inv;
            let y_ref = &y;
            let prod = par::map_indexed(m, |i| inv_ref.row(i).dot(y_ref));
            u.assign(&Array1::from(prod));
        }
        let denominator = scale + y.dot(&u);
        if !denominator.is_finite() || denominator <= MIN_DENOMINATOR {
            return Err(LobsError::NumericalInstability { step: j, denominator });
        }
        let u_ref = &u;
        par::for_each_row_mut(&mut inv, |i, mut row| {
            let coef = u_ref[i] / denominator;
            if coef != 0.0 {
                row.scaled_add(-coef, u_ref);
            }
        });
    }
    Ok(PsiInverse {
        layer_index,
        inv,
        alpha,
        sample_count: n,
    })
}
