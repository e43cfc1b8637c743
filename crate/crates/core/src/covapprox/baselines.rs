use nalgebra::DMatrix;

use super::{CovarianceApproximation, Provenance};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, sym_eig, symmetrize, LinearOperator, SpdMatrix};
use crate::model::GaussianLinearModel;
use crate::rng;

fn check_rank(model: &GaussianLinearModel, r: usize) -> Result<()> {
    if r > model.n() {
        Err(Error::Rank {
            requested: r,
            available: model.n(),
        })
    } else {
        Ok(())
    }
}

fn zero_update(
    model: &GaussianLinearModel,
    r: usize,
    provenance: Provenance,
) -> Result<CovarianceApproximation> {
    CovarianceApproximation::guarded(
        model,
        r,
        DMatrix::zeros(model.n(), 0),
        Vec::new(),
        provenance,
    )
}

/// Low-rank approximation of `H` by its top `r` eigenpairs `(sᵢ², vᵢ)`:
/// `Γ̂pos = Γpr − Γpr V (S⁻¹ + Vᵀ Γpr V)⁻¹ Vᵀ Γpr`, `S = diag(sᵢ²)`.
/// Zero eigenvalues among the top `r` are dropped with a warning.
pub fn hessian_based_update(
    model: &GaussianLinearModel,
    r: usize,
    dense_limit: usize,
) -> Result<CovarianceApproximation> {
    Ok(hessian_based_updates(model, &[r], dense_limit)?.remove(0))
}

/// [`hessian_based_update`] for several ranks from one eigendecomposition.
pub fn hessian_based_updates(
    model: &GaussianLinearModel,
    ranks: &[usize],
    dense_limit: usize,
) -> Result<Vec<CovarianceApproximation>> {
    for &r in ranks {
        check_rank(model, r)?;
    }
    let h = model.hessian_dense(dense_limit)?;
    let eig = sym_eig(&h)?;
    let top = eig.values.iter().copied().fold(0.0_f64, f64::max);
    ranks
        .iter()
        .map(|&r| {
            let keep: Vec<usize> = (0..r).filter(|&i| eig.values[i] > 1e-12 * top).collect();
            if keep.len() < r {
                log::warn!(
                    "Hessian has only {} nonzero eigenvalues among the top {r}; reducing the rank",
                    keep.len()
                );
            }
            if keep.is_empty() {
                return zero_update(model, r, Provenance::Hessian);
            }
            let q = keep.len();
            let mut v = DMatrix::zeros(model.n(), q);
            for (c, &i) in keep.iter().enumerate() {
                v.set_column(c, &eig.vectors.column(i));
            }
            let pv = model.gamma_pr().matrix() * &v;
            let mut inner = v.tr_mul(&pv);
            for (c, &i) in keep.iter().enumerate() {
                inner[(c, c)] += 1.0 / eig.values[i];
            }
            let l = cholesky_lower(&symmetrize(&inner))?;
            let k = l
                .solve_lower_triangular(&pv.transpose())
                .ok_or_else(|| Error::Factorization("singular Hessian block".into()))?
                .transpose();
            CovarianceApproximation::guarded(model, r, k, vec![1.0; q], Provenance::Hessian)
        })
        .collect()
}

/// Restriction of the likelihood to the top `r` prior eigenvectors
/// `(tᵢ, uᵢ)`: `Γ̂pos = Γpr − U [T − (T⁻¹ + Uᵀ H U)⁻¹] Uᵀ`, which is the
/// Woodbury form of `U T ((UᵀHU)⁻¹ + T)⁻¹ T Uᵀ` and needs no inverse of
/// the possibly singular `Uᵀ H U`.
pub fn prior_based_update(
    model: &GaussianLinearModel,
    r: usize,
) -> Result<CovarianceApproximation> {
    Ok(prior_based_updates(model, &[r])?.remove(0))
}

/// [`prior_based_update`] for several ranks from one eigendecomposition.
pub fn prior_based_updates(
    model: &GaussianLinearModel,
    ranks: &[usize],
) -> Result<Vec<CovarianceApproximation>> {
    for &r in ranks {
        check_rank(model, r)?;
    }
    let eig = sym_eig(model.gamma_pr().matrix())?;
    let rmax = ranks.iter().copied().max().unwrap_or(0);
    let u_all = eig.vectors.columns(0, rmax).into_owned();
    let hu_all = model.hessian().apply_matrix(&u_all);
    ranks
        .iter()
        .map(|&r| {
            if r == 0 {
                return zero_update(model, r, Provenance::Prior);
            }
            let u = u_all.columns(0, r);
            let t = eig.values.rows(0, r).into_owned();
            let a = u.tr_mul(&hu_all.columns(0, r));
            let mut inner = symmetrize(&a);
            for i in 0..r {
                inner[(i, i)] += 1.0 / t[i];
            }
            let inner_inv = SpdMatrix::new(inner)?.inverse();
            let mid = symmetrize(&(DMatrix::from_diagonal(&t) - inner_inv));
            let me = sym_eig(&mid)?;
            let cutoff = 1e-14 * t[0];
            let keep: Vec<usize> = (0..r).filter(|&i| me.values[i] > cutoff).collect();
            let mut k = DMatrix::zeros(model.n(), keep.len());
            for (c, &i) in keep.iter().enumerate() {
                k.set_column(c, &(u * me.vectors.column(i) * me.values[i].sqrt()));
            }
            let q = keep.len();
            CovarianceApproximation::guarded(model, r, k, vec![1.0; q], Provenance::Prior)
        })
        .collect()
}

/// Top `r` eigenpairs of `Γpr − Γpos`: the update closest to the exact
/// posterior covariance in Frobenius norm.
pub fn frobenius_based_update(
    model: &GaussianLinearModel,
    r: usize,
    dense_limit: usize,
) -> Result<CovarianceApproximation> {
    Ok(frobenius_based_updates(model, &[r], dense_limit)?.remove(0))
}

/// [`frobenius_based_update`] for several ranks from one eigendecomposition.
pub fn frobenius_based_updates(
    model: &GaussianLinearModel,
    ranks: &[usize],
    dense_limit: usize,
) -> Result<Vec<CovarianceApproximation>> {
    for &r in ranks {
        check_rank(model, r)?;
    }
    let post = model.exact_posterior_with_limit(dense_limit)?;
    let diff = symmetrize(&(model.gamma_pr().matrix() - post.gamma_pos.matrix()));
    let eig = sym_eig(&diff)?;
    let top = eig.values.iter().copied().fold(0.0_f64, f64::max);
    ranks
        .iter()
        .map(|&r| {
            let keep: Vec<usize> = (0..r).filter(|&i| eig.values[i] > 1e-14 * top).collect();
            let mut k = DMatrix::zeros(model.n(), keep.len());
            for (c, &i) in keep.iter().enumerate() {
                k.set_column(c, &(eig.vectors.column(i) * eig.values[i].sqrt()));
            }
            let q = keep.len();
            CovarianceApproximation::guarded(model, r, k, vec![1.0; q], Provenance::Frobenius)
        })
        .collect()
}

/// BFGS iterates `B₀ = Γpr, B₁, …` for `J(x) = ½ xᵀ Γpos⁻¹ x` with exact
/// line search from a standard normal `x₀`. After an early stop the last
/// iterate is repeated, so `covariances[r]` is always the rank-`r` result.
#[derive(Clone, Debug)]
pub struct BfgsIterates {
    pub covariances: Vec<DMatrix<f64>>,
    /// Number of steps taken before an early stop, if one occurred.
    pub stopped_after: Option<usize>,
}

pub fn bfgs_iterates(
    model: &GaussianLinearModel,
    steps: usize,
    seed: u64,
    dense_limit: usize,
) -> Result<BfgsIterates> {
    bfgs_iterates_at(model, &(0..=steps).collect::<Vec<_>>(), seed, dense_limit)
}

/// [`bfgs_iterates`] keeping only the iterates `B_r` for `r` in `ranks`
/// (strictly increasing), so `covariances[i]` belongs to `ranks[i]`.
pub fn bfgs_iterates_at(
    model: &GaussianLinearModel,
    ranks: &[usize],
    seed: u64,
    dense_limit: usize,
) -> Result<BfgsIterates> {
    let steps = ranks.last().copied().unwrap_or(0);
    check_rank(model, steps)?;
    if ranks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "BFGS ranks must be strictly increasing, got {ranks:?}"
        )));
    }
    let n = model.n();
    let post = model.exact_posterior_with_limit(dense_limit)?;
    let a = post.precision.matrix();
    let mut b = model.gamma_pr().matrix().clone();
    let mut x = rng::normal_vector(&mut rng::stream(seed, 0xbf65), n);
    let mut g = a * &x;
    let g0 = g.norm();
    let mut covariances = Vec::with_capacity(ranks.len());
    let mut wanted = ranks.iter().peekable();
    if wanted.peek() == Some(&&0) {
        covariances.push(b.clone());
        wanted.next();
    }
    let mut stopped_after = None;
    for step in 0..steps {
        if g.norm() <= 1e-12 * g0 {
            log::warn!("BFGS converged after {step} of {steps} steps; stopping");
            stopped_after = Some(step);
            break;
        }
        let p = -(&b * &g);
        let gp = g.dot(&p);
        let ap = a * &p;
        let curv = p.dot(&ap);
        if !(gp < 0.0) || !(curv > 0.0) {
            log::warn!("BFGS lost descent after {step} of {steps} steps; stopping");
            stopped_after = Some(step);
            break;
        }
        let alpha = -gp / curv;
        let s = &p * alpha;
        let yv = &ap * alpha;
        let sy = s.dot(&yv);
        if !(sy > 0.0) {
            log::warn!("BFGS curvature condition failed after {step} of {steps} steps; stopping");
            stopped_after = Some(step);
            break;
        }
        x += &s;
        g += &yv;
        let rho = 1.0 / sy;
        let by = &b * &yv;
        let yby = yv.dot(&by);
        b -= (&s * by.transpose() + &by * s.transpose()) * rho;
        b += &s * s.transpose() * (rho * rho * yby + rho);
        b = symmetrize(&b);
        if wanted.peek() == Some(&&(step + 1)) {
            covariances.push(b.clone());
            wanted.next();
        }
    }
    while covariances.len() < ranks.len() {
        covariances.push(b.clone());
    }
    Ok(BfgsIterates {
        covariances,
        stopped_after,
    })
}

/// `r` BFGS steps (see [`bfgs_iterates`]). Returns `Γ̂pos = B_r`, written
/// as `Γpr − K diag(s) Kᵀ`.
///
/// `Γpr − B_r` generally has rank `r + 1` and one negative eigenvalue,
/// so the factor carries signs. Iteration stops early, with the
/// early-stop flag set, once the gradient has essentially vanished or
/// the curvature condition fails.
pub fn bfgs_based_update(
    model: &GaussianLinearModel,
    r: usize,
    seed: u64,
    dense_limit: usize,
) -> Result<CovarianceApproximation> {
    let it = bfgs_iterates(model, r, seed, dense_limit)?;
    let n = model.n();
    let b = &it.covariances[r];
    let diff = symmetrize(&(model.gamma_pr().matrix() - b));
    let eig = sym_eig(&diff)?;
    let scale = eig.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let prior_scale = model.gamma_pr().matrix().norm();
    let cutoff = 1e-13 * prior_scale.max(scale);
    let keep: Vec<usize> = (0..n).filter(|&i| eig.values[i].abs() > cutoff).collect();
    let mut k = DMatrix::zeros(n, keep.len());
    let mut signs = Vec::with_capacity(keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let v = eig.values[i];
        k.set_column(c, &(eig.vectors.column(i) * v.abs().sqrt()));
        signs.push(v.signum());
    }
    Ok(
        CovarianceApproximation::guarded(model, r, k, signs, Provenance::Bfgs)?
            .with_early_stop(it.stopped_after.is_some()),
    )
}
