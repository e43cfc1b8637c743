//! Low-rank negative semidefinite updates of the prior covariance.
//!
//! The optimal rank-`r` update is built from the leading generalized
//! eigenpairs of `(H, Γpr⁻¹)`; the baselines in [`baselines`] return the
//! same [`CovarianceApproximation`] type so that every loss curve goes
//! through one code path.

mod baselines;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::mmio;
use crate::linalg::{
    cholesky_lower, generalized_eig, generalized_eig_factored, sym_eigenvalues, symmetrize,
    Composed, EigMethod, EigOptions, GeneralizedEigen, LinearOperator, SpdMatrix, SquareRootFactor,
};
use crate::model::GaussianLinearModel;
use crate::rng;

pub use baselines::{
    bfgs_based_update, bfgs_iterates, bfgs_iterates_at, frobenius_based_update,
    frobenius_based_updates, hessian_based_update, hessian_based_updates, prior_based_update,
    prior_based_updates, BfgsIterates,
};

/// Where a covariance update came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Optimal,
    Hessian,
    Prior,
    Frobenius,
    Bfgs,
    /// Supplied directly by the caller.
    Custom,
}

impl Provenance {
    pub const BASELINES: [Provenance; 4] = [
        Provenance::Hessian,
        Provenance::Prior,
        Provenance::Frobenius,
        Provenance::Bfgs,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Optimal => "optimal",
            Provenance::Hessian => "hessian",
            Provenance::Prior => "prior",
            Provenance::Frobenius => "frobenius",
            Provenance::Bfgs => "bfgs",
            Provenance::Custom => "custom",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimal" => Ok(Provenance::Optimal),
            "hessian" => Ok(Provenance::Hessian),
            "prior" => Ok(Provenance::Prior),
            "frobenius" => Ok(Provenance::Frobenius),
            "bfgs" => Ok(Provenance::Bfgs),
            "custom" => Ok(Provenance::Custom),
            other => Err(Error::Config(format!(
                "unknown covariance method {other:?}"
            ))),
        }
    }
}

/// Leading generalized eigenpairs of `(H, Γpr⁻¹)` with the companion
/// vectors `w̃ᵢ = Γpr⁻¹ ŵᵢ`.
#[derive(Clone, Debug)]
pub struct PencilDecomposition {
    /// `δᵢ²`, non-increasing.
    pub delta_sq: DVector<f64>,
    /// `ŵᵢ`, with `Ŵᵀ Γpr⁻¹ Ŵ = I`.
    pub w_hat: DMatrix<f64>,
    /// `w̃ᵢ`, with `W̃ᵀ Γpr W̃ = I`.
    pub w_tilde: DMatrix<f64>,
    /// Orthonormal eigenvectors `wᵢ` of `Sᵀ H S`.
    pub whitened: DMatrix<f64>,
    pub prior_sqrt: SquareRootFactor,
    pub residuals: Vec<f64>,
    pub method: EigMethod,
    model_ref: String,
}

impl PencilDecomposition {
    /// The `k` leading pairs for `model`.
    ///
    /// The dense method works from the whitened forward operator when both
    /// dimensions are within `dense_fallback_dim`.
    pub fn compute(model: &GaussianLinearModel, k: usize, opts: &EigOptions) -> Result<Self> {
        let limit = opts.dense_fallback_dim;
        let ge = if opts.method == EigMethod::DenseWhitened
            && model.n() <= limit
            && model.m() <= limit
        {
            generalized_eig_factored(
                model.forward().as_ref(),
                model.gamma_obs(),
                model.gamma_pr(),
                k,
            )?
        } else {
            generalized_eig(&model.hessian(), model.gamma_pr(), k, opts)?
        };
        Self::from_generalized(model, ge)
    }

    pub fn from_generalized(model: &GaussianLinearModel, ge: GeneralizedEigen) -> Result<Self> {
        let w_tilde = ge.prior_sqrt.solve_transpose(&ge.whitened)?;
        Ok(PencilDecomposition {
            delta_sq: ge.pairs.values,
            w_hat: ge.pairs.vectors,
            w_tilde,
            whitened: ge.whitened,
            prior_sqrt: ge.prior_sqrt,
            residuals: ge.residuals,
            method: ge.method,
            model_ref: model.fingerprint(),
        })
    }

    pub fn len(&self) -> usize {
        self.delta_sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_sq.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.w_hat.nrows()
    }

    pub fn model_ref(&self) -> &str {
        &self.model_ref
    }

    fn check_rank(&self, r: usize) -> Result<()> {
        if r > self.len() {
            Err(Error::Rank {
                requested: r,
                available: self.len(),
            })
        } else {
            Ok(())
        }
    }

    /// Indices `i < r` with `δᵢ² > 0`.
    fn informative(&self, r: usize) -> Vec<usize> {
        (0..r).filter(|&i| self.delta_sq[i] > 0.0).collect()
    }
}

/// `Γ̂pos = Γpr − K diag(s) Kᵀ`.
///
/// The signs `s` are all `+1` except for the BFGS baseline, whose update
/// is not in general negative semidefinite.
#[derive(Clone, Debug)]
pub struct CovarianceApproximation {
    rank: usize,
    factor: DMatrix<f64>,
    signs: Vec<f64>,
    provenance: Provenance,
    model_ref: String,
    gamma_pr: Arc<SpdMatrix>,
    early_stop: bool,
}

impl CovarianceApproximation {
    fn unchecked(
        model: &GaussianLinearModel,
        rank: usize,
        factor: DMatrix<f64>,
        signs: Vec<f64>,
        provenance: Provenance,
    ) -> Self {
        CovarianceApproximation {
            rank,
            factor,
            signs,
            provenance,
            model_ref: model.fingerprint(),
            gamma_pr: model.gamma_pr().clone(),
            early_stop: false,
        }
    }

    /// Builds and checks that `Γpr − K diag(s) Kᵀ` is safely positive
    /// definite: its smallest eigenvalue must exceed `1e-12 ‖Γpr‖₂`.
    pub(crate) fn guarded(
        model: &GaussianLinearModel,
        rank: usize,
        factor: DMatrix<f64>,
        signs: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        let out = Self::unchecked(model, rank, factor, signs, provenance);
        let cov = out.covariance();
        let eigs = sym_eigenvalues(&cov);
        let scale = sym_eigenvalues(model.gamma_pr().matrix())[0];
        let smallest = eigs[eigs.len() - 1];
        if !(smallest > 1e-12 * scale) {
            let pivot = cholesky_lower(&cov)
                .err()
                .map_or(cov.nrows() - 1, |e| match e {
                    Error::NotPositiveDefinite { pivot } => pivot,
                    _ => cov.nrows() - 1,
                });
            return Err(Error::NotPositiveDefinite { pivot });
        }
        Ok(out)
    }

    /// A caller-supplied update `K Kᵀ` with `rank(K) ≤ rank`.
    pub fn from_factor(
        model: &GaussianLinearModel,
        factor: DMatrix<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        if factor.nrows() != model.n() {
            return Err(Error::shape(format!(
                "update factor has {} rows, expected {}",
                factor.nrows(),
                model.n()
            )));
        }
        let rank = factor.ncols();
        let signs = vec![1.0; rank];
        Self::guarded(model, rank, factor, signs, provenance)
    }

    pub(crate) fn with_early_stop(mut self, flag: bool) -> Self {
        self.early_stop = flag;
        self
    }

    /// Requested rank.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// The factor `K`; may have fewer columns than the requested rank
    /// (dropped uninformative directions) or, for BFGS, one more.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn model_ref(&self) -> &str {
        &self.model_ref
    }

    /// True when an iterative baseline stopped before the requested rank.
    pub fn early_stopped(&self) -> bool {
        self.early_stop
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// `K diag(s) Kᵀ`.
    pub fn update(&self) -> DMatrix<f64> {
        let mut scaled = self.factor.clone();
        for (j, s) in self.signs.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        symmetrize(&(scaled * self.factor.transpose()))
    }

    /// Dense `Γ̂pos`.
    pub fn covariance(&self) -> DMatrix<f64> {
        symmetrize(&(self.gamma_pr.matrix() - self.update()))
    }

    pub fn covariance_spd(&self) -> Result<SpdMatrix> {
        SpdMatrix::new(self.covariance())
    }

    /// `Γ̂pos x` without forming the matrix.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut c = self.factor.tr_mul(x);
        for (ci, s) in c.iter_mut().zip(&self.signs) {
            *ci *= s;
        }
        self.gamma_pr.apply(x) - &self.factor * c
    }

    pub fn apply_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = self.factor.tr_mul(x);
        for (i, s) in self.signs.iter().enumerate() {
            c.row_mut(i).scale_mut(*s);
        }
        self.gamma_pr.matrix() * x - &self.factor * c
    }

    /// The equivalent precision update `Γ̂pos⁻¹ = Γpr⁻¹ + U Uᵀ`, from
    /// `U = Γpr⁻¹ K C^{-1/2}` with `C = I − Kᵀ Γpr⁻¹ K`. Only for
    /// negative semidefinite updates.
    pub fn to_precision(&self) -> Result<PrecisionApproximation> {
        if self.signs.iter().any(|s| *s < 0.0) {
            return Err(Error::Provenance {
                expected: "a negative semidefinite update".into(),
                found: format!("{} update with mixed signs", self.provenance),
            });
        }
        let q = self.factor.ncols();
        let pk = self.gamma_pr.solve_matrix(&self.factor);
        let c = symmetrize(&(DMatrix::identity(q, q) - self.factor.tr_mul(&pk)));
        let l = cholesky_lower(&c)?;
        let factor = l
            .solve_lower_triangular(&pk.transpose())
            .ok_or_else(|| Error::Factorization("singular update factor".into()))?
            .transpose();
        Ok(PrecisionApproximation {
            rank: self.rank,
            factor,
            provenance: self.provenance,
            model_ref: self.model_ref.clone(),
        })
    }

    /// Writes `update_factor.mtx` and `approximation.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        mmio::write_dense_file(&dir.join("update_factor.mtx"), &self.factor, false)?;
        let manifest = ApproximationManifest {
            provenance: self.provenance,
            rank: self.rank,
            columns: self.factor.ncols(),
            signs: self.signs.clone(),
            model_ref: self.model_ref.clone(),
            early_stop: self.early_stop,
        };
        fs::write(
            dir.join("approximation.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    /// Reads an approximation written by [`save`](Self::save); `model` must
    /// be the one it was built from.
    pub fn load(dir: &Path, model: &GaussianLinearModel) -> Result<Self> {
        let manifest: ApproximationManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("approximation.json"))?)?;
        if manifest.model_ref != model.fingerprint() {
            return Err(Error::Provenance {
                expected: model.fingerprint(),
                found: manifest.model_ref,
            });
        }
        let factor = mmio::read_file(&dir.join("update_factor.mtx"))?.into_dense();
        if factor.nrows() != model.n() || factor.ncols() != manifest.signs.len() {
            return Err(Error::Config(
                "update factor does not match its manifest".into(),
            ));
        }
        Ok(Self::unchecked(
            model,
            manifest.rank,
            factor,
            manifest.signs,
            manifest.provenance,
        )
        .with_early_stop(manifest.early_stop))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApproximationManifest {
    pub provenance: Provenance,
    pub rank: usize,
    pub columns: usize,
    pub signs: Vec<f64>,
    pub model_ref: String,
    pub early_stop: bool,
}

/// `Γ̂pos⁻¹ = Γpr⁻¹ + U Uᵀ`.
#[derive(Clone, Debug)]
pub struct PrecisionApproximation {
    rank: usize,
    factor: DMatrix<f64>,
    provenance: Provenance,
    model_ref: String,
}

impl PrecisionApproximation {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Dense `Γpr⁻¹ + U Uᵀ`.
    pub fn precision(&self, gamma_pr: &SpdMatrix) -> DMatrix<f64> {
        symmetrize(&(gamma_pr.inverse() + &self.factor * self.factor.transpose()))
    }

    /// `K = Γpr U (I + Uᵀ Γpr U)^{-1/2}`, so that
    /// `(Γpr⁻¹ + U Uᵀ)⁻¹ = Γpr − K Kᵀ`.
    pub fn to_covariance(&self, model: &GaussianLinearModel) -> Result<CovarianceApproximation> {
        let q = self.factor.ncols();
        let pu = model.gamma_pr().matrix() * &self.factor;
        let c = symmetrize(&(DMatrix::identity(q, q) + self.factor.tr_mul(&pu)));
        let l = cholesky_lower(&c)?;
        let k = l
            .solve_lower_triangular(&pu.transpose())
            .ok_or_else(|| Error::Factorization("singular update factor".into()))?
            .transpose();
        let mut out =
            CovarianceApproximation::unchecked(model, self.rank, k, vec![1.0; q], self.provenance);
        out.model_ref = self.model_ref.clone();
        Ok(out)
    }
}

/// `K Kᵀ = Σ_{i≤r} δᵢ²/(1+δᵢ²) ŵᵢ ŵᵢᵀ`.
pub fn optimal_covariance_update(
    model: &GaussianLinearModel,
    pencil: &PencilDecomposition,
    r: usize,
) -> Result<CovarianceApproximation> {
    pencil.check_rank(r)?;
    check_same_model(model, pencil)?;
    let keep = pencil.informative(r);
    let mut k = DMatrix::zeros(pencil.dim(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let d2 = pencil.delta_sq[i];
        k.set_column(c, &(pencil.w_hat.column(i) * (d2 / (1.0 + d2)).sqrt()));
    }
    let q = k.ncols();
    Ok(CovarianceApproximation::unchecked(
        model,
        r,
        k,
        vec![1.0; q],
        Provenance::Optimal,
    ))
}

/// `U Uᵀ = Σ_{i≤r} δᵢ² w̃ᵢ w̃ᵢᵀ`.
pub fn optimal_precision_update(
    pencil: &PencilDecomposition,
    r: usize,
) -> Result<PrecisionApproximation> {
    pencil.check_rank(r)?;
    let keep = pencil.informative(r);
    let mut u = DMatrix::zeros(pencil.dim(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        u.set_column(c, &(pencil.w_tilde.column(i) * pencil.delta_sq[i].sqrt()));
    }
    Ok(PrecisionApproximation {
        rank: r,
        factor: u,
        provenance: Provenance::Optimal,
        model_ref: pencil.model_ref.clone(),
    })
}

fn check_same_model(model: &GaussianLinearModel, pencil: &PencilDecomposition) -> Result<()> {
    if model.fingerprint() != pencil.model_ref {
        return Err(Error::Provenance {
            expected: model.fingerprint(),
            found: pencil.model_ref.clone(),
        });
    }
    Ok(())
}

/// `P_r = Σ_{i≤r} ŵᵢ w̃ᵢᵀ`, idempotent and in general not symmetric.
#[derive(Clone, Debug)]
pub struct ObliqueProjector {
    rank: usize,
    w_hat: DMatrix<f64>,
    w_tilde: DMatrix<f64>,
}

impl ObliqueProjector {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        &self.w_hat * self.w_tilde.transpose()
    }

    /// The model `(G P_r, Γobs, Γpr)`.
    pub fn projected_model(&self, model: &GaussianLinearModel) -> Result<GaussianLinearModel> {
        let g = Composed::new(model.forward().clone(), Arc::new(self.clone()))?;
        model.with_forward(Arc::new(g))
    }
}

impl LinearOperator for ObliqueProjector {
    fn nrows(&self) -> usize {
        self.w_hat.nrows()
    }
    fn ncols(&self) -> usize {
        self.w_hat.nrows()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w_hat * self.w_tilde.tr_mul(x)
    }
    fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.w_tilde * self.w_hat.tr_mul(y)
    }
    fn apply_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.w_hat * self.w_tilde.tr_mul(x)
    }
    fn apply_transpose_matrix(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        &self.w_tilde * self.w_hat.tr_mul(y)
    }
}

pub fn optimal_projector(pencil: &PencilDecomposition, r: usize) -> Result<ObliqueProjector> {
    pencil.check_rank(r)?;
    Ok(ObliqueProjector {
        rank: r,
        w_hat: pencil.w_hat.columns(0, r).into_owned(),
        w_tilde: pencil.w_tilde.columns(0, r).into_owned(),
    })
}

/// `Ŝpos = S (Σ_{i≤r} [(1+δᵢ²)^{-1/2} − 1] wᵢ wᵢᵀ + I)`, a non-symmetric
/// square root of the optimal `Γ̂pos`.
#[derive(Clone, Debug)]
pub struct PosteriorSquareRootApprox {
    rank: usize,
    prior_sqrt: SquareRootFactor,
    w: DMatrix<f64>,
    coeffs: DVector<f64>,
}

impl PosteriorSquareRootApprox {
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `Ŝpos z`.
    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        let c = self.w.tr_mul(z).component_mul(&self.coeffs);
        self.prior_sqrt.apply(&(z + &self.w * c))
    }

    pub fn apply_matrix(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = self.w.tr_mul(z);
        for (i, ci) in self.coeffs.iter().enumerate() {
            c.row_mut(i).scale_mut(*ci);
        }
        self.prior_sqrt.factor() * (z + &self.w * c)
    }

    pub fn factor(&self) -> DMatrix<f64> {
        let n = self.prior_sqrt.dim();
        self.apply_matrix(&DMatrix::identity(n, n))
    }

    /// `count` draws `μ + Ŝpos z` as columns.
    pub fn sample(&self, mean: &DVector<f64>, count: usize, seed: u64) -> Result<DMatrix<f64>> {
        let n = self.prior_sqrt.dim();
        if mean.len() != n {
            return Err(Error::shape(format!(
                "mean has length {}, expected {n}",
                mean.len()
            )));
        }
        let z = rng::normal_matrix(&mut rng::stream(seed, 0x5351), n, count);
        let mut x = self.apply_matrix(&z);
        for mut c in x.column_iter_mut() {
            c += mean;
        }
        Ok(x)
    }
}

pub fn posterior_sqrt_approx(
    pencil: &PencilDecomposition,
    r: usize,
) -> Result<PosteriorSquareRootApprox> {
    pencil.check_rank(r)?;
    let coeffs = DVector::from_iterator(
        r,
        (0..r).map(|i| 1.0 / (1.0 + pencil.delta_sq[i].max(0.0)).sqrt() - 1.0),
    );
    Ok(PosteriorSquareRootApprox {
        rank: r,
        prior_sqrt: pencil.prior_sqrt.clone(),
        w: pencil.whitened.columns(0, r).into_owned(),
        coeffs,
    })
}

/// `f(1) r + Σ_{i>r} f(1/(1+δᵢ²))`: the loss of the optimal rank-`r`
/// update, given every generalized eigenvalue of the pencil.
pub fn minimum_loss(delta_sq: &[f64], r: usize, f: impl Fn(f64) -> f64) -> f64 {
    let tail: f64 = delta_sq
        .iter()
        .skip(r)
        .map(|d2| f(1.0 / (1.0 + d2.max(0.0))))
        .sum();
    f(1.0) * r.min(delta_sq.len()) as f64 + tail
}

/// Upper bound on the squared Förstner loss of the optimal rank-`r`
/// update when only the leading `k = delta_sq.len()` of `n` eigenvalues
/// are known: the unknown tail is bounded by `δ_k²`.
pub fn forstner_loss_bound(delta_sq: &[f64], n: usize, r: usize) -> f64 {
    let f = |d2: f64| (1.0 + d2.max(0.0)).ln().powi(2);
    let known: f64 = delta_sq.iter().skip(r).map(|d| f(*d)).sum();
    let unknown = n.saturating_sub(delta_sq.len().max(r));
    let last = delta_sq.last().copied().unwrap_or(0.0);
    known + unknown as f64 * f(last)
}

/// Smallest rank whose loss bound is at most `tol²`, if the computed
/// eigenvalues suffice to certify one.
pub fn rank_for_tolerance(delta_sq: &[f64], n: usize, tol: f64) -> Option<usize> {
    (0..=delta_sq.len()).find(|&r| forstner_loss_bound(delta_sq, n, r) <= tol * tol)
}

/// A random member of the feasible rank-`r` class: `K = S Q diag(c)` with
/// `Q` orthonormal and `cᵢ² ∈ (0, 1)`, so `Γpr − K Kᵀ` is SPD.
pub fn random_feasible_update<R: Rng + ?Sized>(
    model: &GaussianLinearModel,
    r: usize,
    rng: &mut R,
) -> Result<CovarianceApproximation> {
    let n = model.n();
    if r > n {
        return Err(Error::Rank {
            requested: r,
            available: n,
        });
    }
    let q = rng::normal_matrix(rng, n, r.max(1))
        .qr()
        .q()
        .columns(0, r)
        .into_owned();
    let c: Vec<f64> = (0..r)
        .map(|_| rng.random_range(0.0..0.999f64).sqrt())
        .collect();
    let mut k = model.gamma_pr().cholesky_factor() * q;
    for (j, cj) in c.iter().enumerate() {
        k.column_mut(j).scale_mut(*cj);
    }
    CovarianceApproximation::from_factor(model, k, Provenance::Custom)
}

#[cfg(test)]
mod tests;
