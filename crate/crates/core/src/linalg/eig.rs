use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::operator::{columns_to_matrix, LinearOperator};
use super::spd::{max_abs, spd_sqrt, symmetrize, symmetry_defect, SpdMatrix, SquareRootFactor};
use crate::error::{Error, Result};
use crate::rng;

/// Below this dimension the dense whitened solver is used whenever an
/// iterative method fails.
pub const DEFAULT_DENSE_FALLBACK_DIM: usize = 512;
pub const DEFAULT_EIG_TOL: f64 = 1e-8;

/// Which inner product the eigenvectors are orthonormal in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orthonormality {
    Standard,
    /// `Vᵀ B V = I` for the pencil's right-hand matrix `B`.
    Weighted,
}

/// Eigenvalues sorted non-increasing, with paired columns.
#[derive(Clone, Debug)]
pub struct EigenPairs {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
    pub orthonormality: Orthonormality,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leading `k` pairs.
    pub fn truncate(&self, k: usize) -> EigenPairs {
        EigenPairs {
            values: self.values.rows(0, k).into_owned(),
            vectors: self.vectors.columns(0, k).into_owned(),
            orthonormality: self.orthonormality,
        }
    }
}

/// Flips each column so that its first clearly nonzero entry is positive.
pub(crate) fn fix_signs(vectors: &mut DMatrix<f64>) -> Vec<f64> {
    let mut signs = Vec::with_capacity(vectors.ncols());
    for j in 0..vectors.ncols() {
        let mut col = vectors.column_mut(j);
        let scale = col.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let first = col.iter().copied().find(|v| v.abs() > 1e-10 * scale);
        let sign = match first {
            Some(v) if v < 0.0 => -1.0,
            _ => 1.0,
        };
        if sign < 0.0 {
            col.neg_mut();
        }
        signs.push(sign);
    }
    signs
}

/// Indices sorting `values` non-increasing; equal values keep their
/// original order.
pub(crate) fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

fn sorted_pairs(eig: SymmetricEigen<f64, nalgebra::Dyn>) -> (DVector<f64>, DMatrix<f64>) {
    let order = descending_order(eig.eigenvalues.as_slice());
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(eig.eigenvectors.nrows(), order.len());
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    fix_signs(&mut vectors);
    (values, vectors)
}

/// Full eigendecomposition of a dense symmetric matrix.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<EigenPairs> {
    if a.nrows() != a.ncols() {
        return Err(Error::shape(format!(
            "eigendecomposition of {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = max_abs(a);
    if symmetry_defect(a) > 1e-10 * scale {
        return Err(Error::shape("eigendecomposition input is not symmetric"));
    }
    let (values, vectors) = sorted_pairs(SymmetricEigen::new(symmetrize(a)));
    Ok(EigenPairs {
        values,
        vectors,
        orthonormality: Orthonormality::Standard,
    })
}

/// Eigenvalues only, sorted non-increasing.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> DVector<f64> {
    let mut v: Vec<f64> = symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    v.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    DVector::from_vec(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigMethod {
    DenseWhitened,
    Lanczos,
    Randomized,
}

impl EigMethod {
    /// Dense below the fallback dimension, Lanczos above it.
    pub fn for_dim(dim: usize, dense_fallback_dim: usize) -> EigMethod {
        if dim <= dense_fallback_dim {
            EigMethod::DenseWhitened
        } else {
            EigMethod::Lanczos
        }
    }
}

#[derive(Clone, Debug)]
pub struct EigOptions {
    pub method: EigMethod,
    /// Residual tolerance, relative to `δ² + 1`.
    pub tol: f64,
    pub dense_fallback_dim: usize,
    pub seed: u64,
    pub oversampling: usize,
    pub power_iterations: usize,
}

impl Default for EigOptions {
    fn default() -> Self {
        EigOptions {
            method: EigMethod::DenseWhitened,
            tol: DEFAULT_EIG_TOL,
            dense_fallback_dim: DEFAULT_DENSE_FALLBACK_DIM,
            seed: 0,
            oversampling: 10,
            power_iterations: 2,
        }
    }
}

impl EigOptions {
    pub fn with_method(method: EigMethod) -> Self {
        EigOptions {
            method,
            ..Default::default()
        }
    }
}

/// Leading generalized eigenpairs of `(H, Γpr⁻¹)`.
#[derive(Clone, Debug)]
pub struct GeneralizedEigen {
    /// `δᵢ²` and `ŵᵢ`, with `Ŵᵀ Γpr⁻¹ Ŵ = I`.
    pub pairs: EigenPairs,
    /// Whitened eigenvectors `wᵢ = S⁻¹ ŵᵢ` of `Sᵀ H S`, orthonormal.
    pub whitened: DMatrix<f64>,
    /// `‖Ĥ wᵢ − δᵢ² wᵢ‖` in the whitened space.
    pub residuals: Vec<f64>,
    pub method: EigMethod,
    pub prior_sqrt: SquareRootFactor,
}

/// `v ↦ Sᵀ H S v`.
struct Whitened<'a> {
    h: &'a dyn LinearOperator,
    s: &'a SquareRootFactor,
}

impl Whitened<'_> {
    fn dim(&self) -> usize {
        self.s.dim()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.s.apply_transpose(&self.h.apply(&self.s.apply(v)))
    }
    fn apply_matrix(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let sv = self.s.factor() * v;
        self.s.factor().tr_mul(&self.h.apply_matrix(&sv))
    }
}

fn residuals(op: &Whitened<'_>, values: &DVector<f64>, vectors: &DMatrix<f64>) -> Vec<f64> {
    let av = op.apply_matrix(vectors);
    (0..values.len())
        .map(|i| (av.column(i) - vectors.column(i) * values[i]).norm())
        .collect()
}

fn converged(values: &DVector<f64>, res: &[f64], tol: f64) -> bool {
    res.iter()
        .zip(values.iter())
        .all(|(r, v)| *r <= tol * (v.abs() + 1.0))
}

/// Leading `k` generalized eigenpairs `(δᵢ², ŵᵢ)` of the pencil `(H, Γpr⁻¹)`,
/// obtained by whitening with the Cholesky factor of the prior covariance:
/// eigenpairs `(δᵢ², wᵢ)` of `Sᵀ H S` are mapped to `ŵᵢ = S wᵢ`.
///
/// `H` must be symmetric positive semidefinite. Equal eigenvalues keep the
/// order of the dense solver; the optimal approximations are not unique in
/// that case.
pub fn generalized_eig(
    h: &dyn LinearOperator,
    prior: &SpdMatrix,
    k: usize,
    opts: &EigOptions,
) -> Result<GeneralizedEigen> {
    let n = prior.dim();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::shape(format!(
            "operator is {}x{} but the prior is {n}x{n}",
            h.nrows(),
            h.ncols()
        )));
    }
    if k > n {
        return Err(Error::Rank {
            requested: k,
            available: n,
        });
    }
    let s = spd_sqrt(prior);
    let op = Whitened { h, s: &s };

    let attempt = match opts.method {
        EigMethod::DenseWhitened => dense_whitened(&op, k),
        EigMethod::Lanczos => lanczos(&op, k, opts),
        EigMethod::Randomized => randomized(&op, k, opts),
    };
    let (values, mut whitened, method) = match attempt {
        Ok((v, w)) => (v, w, opts.method),
        Err(err @ Error::Iteration { .. }) => {
            if n <= opts.dense_fallback_dim {
                log::warn!(
                    "{:?} eigensolver failed ({err}); using the dense solver",
                    opts.method
                );
                let (v, w) = dense_whitened(&op, k)?;
                (v, w, EigMethod::DenseWhitened)
            } else {
                return Err(err);
            }
        }
        Err(e) => return Err(e),
    };
    fix_signs(&mut whitened);
    let res = residuals(&op, &values, &whitened);
    let vectors = s.factor() * &whitened;
    Ok(GeneralizedEigen {
        pairs: EigenPairs {
            values,
            vectors,
            orthonormality: Orthonormality::Weighted,
        },
        whitened,
        residuals: res,
        method,
        prior_sqrt: s,
    })
}

/// Generalized eigenpairs of `(Gᵀ Γobs⁻¹ G, Γpr⁻¹)` from the SVD of the
/// whitened forward operator `B = Sobs⁻¹ G S`, so `Sᵀ H S = Bᵀ B` is never
/// formed. `δᵢ` are the singular values of `B`; this keeps the accuracy of
/// the small `δᵢ²` when the large ones are many orders of magnitude above.
pub fn generalized_eig_factored(
    g: &dyn LinearOperator,
    noise: &SpdMatrix,
    prior: &SpdMatrix,
    k: usize,
) -> Result<GeneralizedEigen> {
    let (m, n) = (g.nrows(), g.ncols());
    if prior.dim() != n || noise.dim() != m {
        return Err(Error::shape(format!(
            "forward operator is {m}x{n}, prior {}x{}, noise {}x{}",
            prior.dim(),
            prior.dim(),
            noise.dim(),
            noise.dim()
        )));
    }
    if k > n {
        return Err(Error::Rank {
            requested: k,
            available: n,
        });
    }
    let s = spd_sqrt(prior);
    let b = spd_sqrt(noise).solve(&g.apply_matrix(s.factor()))?;
    let padded = if m < n {
        let mut p = DMatrix::zeros(n, n);
        p.rows_mut(0, m).copy_from(&b);
        p
    } else {
        b.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Factorization("SVD did not return Vᵀ".into()))?;
    let order = descending_order(svd.singular_values.as_slice());
    let values = DVector::from_iterator(
        k,
        order
            .iter()
            .take(k)
            .map(|&i| svd.singular_values[i].powi(2)),
    );
    let mut whitened = DMatrix::zeros(n, k);
    for (c, &i) in order.iter().take(k).enumerate() {
        whitened.set_column(c, &vt.row(i).transpose());
    }
    fix_signs(&mut whitened);
    let bw = &b * &whitened;
    let btbw = b.tr_mul(&bw);
    let res = (0..k)
        .map(|i| (btbw.column(i) - whitened.column(i) * values[i]).norm())
        .collect();
    let vectors = s.factor() * &whitened;
    Ok(GeneralizedEigen {
        pairs: EigenPairs {
            values,
            vectors,
            orthonormality: Orthonormality::Weighted,
        },
        whitened,
        residuals: res,
        method: EigMethod::DenseWhitened,
        prior_sqrt: s,
    })
}

fn dense_whitened(op: &Whitened<'_>, k: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = op.dim();
    let hat = op.apply_matrix(&DMatrix::identity(n, n));
    let (values, vectors) = sorted_pairs(SymmetricEigen::new(symmetrize(&hat)));
    Ok((
        values.rows(0, k).into_owned(),
        vectors.columns(0, k).into_owned(),
    ))
}

/// Modified Gram-Schmidt against the columns of `basis`, applied twice.
fn orthogonalize(w: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(w);
            w.axpy(-c, q, 1.0);
        }
    }
}

/// Lanczos with full reorthogonalization. Breakdown (an invariant
/// subspace) restarts from a fresh random direction orthogonal to the
/// current basis.
fn lanczos(op: &Whitened<'_>, k: usize, opts: &EigOptions) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = op.dim();
    if k == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(n, 0)));
    }
    let mut rng = rng::stream(opts.seed, 0x1a2c);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut q = rng::normal_vector(&mut rng, n);
    q /= q.norm();
    let mut scale = 0.0_f64;
    let mut last_estimates: Vec<f64> = Vec::new();
    let check_every = 5usize;

    while basis.len() < n {
        basis.push(q.clone());
        let mut w = op.apply(&q);
        let a = q.dot(&w);
        alpha.push(a);
        orthogonalize(&mut w, &basis);
        let b = w.norm();
        scale = scale.max(a.abs()).max(b);
        let m = basis.len();
        let done = m == n;
        if m >= k && (done || (m - k) % check_every == 0 || b <= 1e-12 * scale.max(1.0)) {
            let (theta, s) = tridiagonal_eig(&alpha, &beta);
            let est: Vec<f64> = (0..k).map(|i| (b * s[(m - 1, i)]).abs()).collect();
            let vals = theta.rows(0, k).into_owned();
            if done || converged(&vals, &est, 0.1 * opts.tol) {
                let qm = columns_to_matrix(n, &basis);
                let vectors = qm * s.columns(0, k);
                let res = residuals(op, &vals, &vectors);
                if converged(&vals, &res, opts.tol) {
                    return Ok((vals, vectors));
                }
                if done {
                    return Err(Error::Iteration {
                        message: format!(
                            "Lanczos exhausted the space without meeting tolerance {:.1e}",
                            opts.tol
                        ),
                        residuals: res,
                    });
                }
            }
            last_estimates = est;
        }
        if done {
            break;
        }
        if b <= 1e-12 * scale.max(1.0) {
            // invariant subspace: restart with a new direction, decoupled block
            let mut fresh = rng::normal_vector(&mut rng, n);
            orthogonalize(&mut fresh, &basis);
            let norm = fresh.norm();
            if norm <= 1e-12 {
                break;
            }
            beta.push(0.0);
            q = fresh / norm;
        } else {
            beta.push(b);
            q = w / b;
        }
    }
    Err(Error::Iteration {
        message: "Lanczos breakdown without convergence".into(),
        residuals: last_estimates,
    })
}

/// Eigenpairs of the symmetric tridiagonal matrix with diagonal `alpha`
/// and off-diagonal `beta`, sorted non-increasing.
fn tridiagonal_eig(alpha: &[f64], beta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let m = alpha.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    sorted_pairs(SymmetricEigen::new(t))
}

fn orthonormal_basis(y: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = y.clone().qr();
    qr.q()
}

/// Randomized subspace iteration with oversampling and power steps.
fn randomized(
    op: &Whitened<'_>,
    k: usize,
    opts: &EigOptions,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = op.dim();
    let l = (k + opts.oversampling).min(n);
    let mut rng = rng::stream(opts.seed, 0x5eed);
    let omega = rng::normal_matrix(&mut rng, n, l);
    let mut q = orthonormal_basis(&op.apply_matrix(&omega));
    for _ in 0..opts.power_iterations {
        q = orthonormal_basis(&op.apply_matrix(&q));
    }
    let aq = op.apply_matrix(&q);
    let b = symmetrize(&q.tr_mul(&aq));
    let (theta, u) = sorted_pairs(SymmetricEigen::new(b));
    let vals = theta.rows(0, k).into_owned();
    let vectors = q * u.columns(0, k);
    let res = residuals(op, &vals, &vectors);
    if converged(&vals, &res, opts.tol) {
        Ok((vals, vectors))
    } else {
        Err(Error::Iteration {
            message: format!(
                "randomized subspace iteration did not reach tolerance {:.1e}",
                opts.tol
            ),
            residuals: res,
        })
    }
}
