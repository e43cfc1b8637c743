use nalgebra::{DMatrix, DVector};

use super::eig::{descending_order, fix_signs};
use super::operator::LinearOperator;
use super::spd::SquareRootFactor;
use crate::error::{Error, Result};

/// Triplets `(δᵢ, v̂ᵢ, ŵᵢ)` from the SVD `S_obs⁻¹ G S_pr = Σ δᵢ vᵢ wᵢᵀ`,
/// with `ŵᵢ = S_pr wᵢ` and `v̂ᵢ = S_obs⁻ᵀ vᵢ` (so `v̂ᵢᵀ Γobs v̂ᵢ = 1`).
#[derive(Clone, Debug)]
pub struct GsvdTriplets {
    pub delta: DVector<f64>,
    /// m×k.
    pub v_hat: DMatrix<f64>,
    /// n×k.
    pub w_hat: DMatrix<f64>,
    /// Left singular vectors `vᵢ` of the whitened operator.
    pub left: DMatrix<f64>,
    /// Right singular vectors `wᵢ` of the whitened operator.
    pub right: DMatrix<f64>,
}

impl GsvdTriplets {
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn delta_sq(&self) -> DVector<f64> {
        self.delta.map(|d| d * d)
    }
}

/// Leading `k` triplets (at most `min(m, n)` of them exist).
pub fn gsvd_triplets(
    g: &dyn LinearOperator,
    s_pr: &SquareRootFactor,
    s_obs: &SquareRootFactor,
    k: usize,
) -> Result<GsvdTriplets> {
    let (m, n) = (g.nrows(), g.ncols());
    if s_pr.dim() != n || s_obs.dim() != m {
        return Err(Error::shape(format!(
            "forward operator is {m}x{n}, prior root {}, noise root {}",
            s_pr.dim(),
            s_obs.dim()
        )));
    }
    if k > n {
        return Err(Error::Rank {
            requested: k,
            available: n,
        });
    }
    let gs = g.apply_matrix(s_pr.factor());
    let whitened = s_obs.solve(&gs)?;
    let svd = whitened.svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::Factorization("SVD did not return U".into()))?;
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Factorization("SVD did not return Vᵀ".into()))?;
    let order = descending_order(svd.singular_values.as_slice());
    let k = k.min(order.len());

    let delta = DVector::from_iterator(k, order.iter().take(k).map(|&i| svd.singular_values[i]));
    let mut right = DMatrix::zeros(n, k);
    let mut left = DMatrix::zeros(m, k);
    for (c, &i) in order.iter().take(k).enumerate() {
        right.set_column(c, &vt.row(i).transpose());
        left.set_column(c, &u.column(i));
    }
    let signs = fix_signs(&mut right);
    for (c, s) in signs.iter().enumerate() {
        if *s < 0.0 {
            left.column_mut(c).neg_mut();
        }
    }
    let w_hat = s_pr.factor() * &right;
    let v_hat = s_obs.solve_transpose(&left)?;
    Ok(GsvdTriplets {
        delta,
        v_hat,
        w_hat,
        left,
        right,
    })
}
