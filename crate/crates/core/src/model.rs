//! The linear Gaussian model `y = G x + e`, `e ~ N(0, Γobs)`,
//! `x ~ N(μpr, Γpr)`, and its exact posterior.

use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::mmio::{self, MmMatrix};
use crate::linalg::{
    spd_sqrt, symmetrize, DenseOperator, LinearOperator, SharedOperator, SpdMatrix,
    SquareRootFactor, DEFAULT_DENSE_FALLBACK_DIM,
};
use crate::rng;

#[derive(Clone, Debug)]
pub struct GaussianLinearModel {
    g: SharedOperator,
    gamma_obs: Arc<SpdMatrix>,
    gamma_pr: Arc<SpdMatrix>,
    prior_mean: DVector<f64>,
    label: String,
    fingerprint: OnceLock<String>,
}

impl GaussianLinearModel {
    pub fn new(g: SharedOperator, gamma_obs: SpdMatrix, gamma_pr: SpdMatrix) -> Result<Self> {
        Self::from_shared(g, Arc::new(gamma_obs), Arc::new(gamma_pr))
    }

    pub fn from_shared(
        g: SharedOperator,
        gamma_obs: Arc<SpdMatrix>,
        gamma_pr: Arc<SpdMatrix>,
    ) -> Result<Self> {
        if g.nrows() != gamma_obs.dim() || g.ncols() != gamma_pr.dim() {
            return Err(Error::shape(format!(
                "forward operator is {}x{}, noise covariance {}, prior covariance {}",
                g.nrows(),
                g.ncols(),
                gamma_obs.dim(),
                gamma_pr.dim()
            )));
        }
        let n = gamma_pr.dim();
        Ok(GaussianLinearModel {
            g,
            gamma_obs,
            gamma_pr,
            prior_mean: DVector::zeros(n),
            label: "model".into(),
            fingerprint: OnceLock::new(),
        })
    }

    /// Dense forward matrix.
    pub fn dense(g: DMatrix<f64>, gamma_obs: SpdMatrix, gamma_pr: SpdMatrix) -> Result<Self> {
        Self::new(Arc::new(DenseOperator::new(g)), gamma_obs, gamma_pr)
    }

    pub fn with_prior_mean(mut self, mean: DVector<f64>) -> Result<Self> {
        if mean.len() != self.n() {
            return Err(Error::shape(format!(
                "prior mean has length {}, expected {}",
                mean.len(),
                self.n()
            )));
        }
        self.prior_mean = mean;
        self.fingerprint = OnceLock::new();
        Ok(self)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Parameter dimension.
    pub fn n(&self) -> usize {
        self.gamma_pr.dim()
    }

    /// Data dimension.
    pub fn m(&self) -> usize {
        self.gamma_obs.dim()
    }

    pub fn forward(&self) -> &SharedOperator {
        &self.g
    }

    pub fn gamma_obs(&self) -> &Arc<SpdMatrix> {
        &self.gamma_obs
    }

    pub fn gamma_pr(&self) -> &Arc<SpdMatrix> {
        &self.gamma_pr
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn prior_sqrt(&self) -> SquareRootFactor {
        spd_sqrt(&self.gamma_pr)
    }

    pub fn obs_sqrt(&self) -> SquareRootFactor {
        spd_sqrt(&self.gamma_obs)
    }

    /// Same noise and prior, different forward operator.
    pub fn with_forward(&self, g: SharedOperator) -> Result<Self> {
        let mut out = Self::from_shared(g, self.gamma_obs.clone(), self.gamma_pr.clone())?;
        out.prior_mean = self.prior_mean.clone();
        out.label = self.label.clone();
        Ok(out)
    }

    /// `y' = y − G μpr`: data for the zero-mean problem in `x − μpr`.
    pub fn centered_data(&self, y: &DVector<f64>) -> DVector<f64> {
        y - self.g.apply(&self.prior_mean)
    }

    /// `H = Gᵀ Γobs⁻¹ G` as an operator.
    pub fn hessian(&self) -> HessianOperator {
        HessianOperator {
            g: self.g.clone(),
            gamma_obs: self.gamma_obs.clone(),
        }
    }

    /// Dense `H`, refused above `limit`.
    pub fn hessian_dense(&self, limit: usize) -> Result<DMatrix<f64>> {
        check_limit(self.n(), limit)?;
        let gd = self.g.to_dense();
        Ok(symmetrize(&gd.tr_mul(&self.gamma_obs.solve_matrix(&gd))))
    }

    /// Exact posterior under the default dense limit.
    pub fn exact_posterior(&self) -> Result<ExactPosterior> {
        self.exact_posterior_with_limit(DEFAULT_DENSE_FALLBACK_DIM)
    }

    /// Brute-force posterior from the Householder QR of `[B; I] = QR` with
    /// `B = Lobs⁻¹ G S`, `Γpr = S Sᵀ`, `Γobs = Lobs Lobsᵀ`. Then
    /// `Γpos = (S R⁻¹)(S R⁻¹)ᵀ` and the mean map is `S R⁻¹ Q₁ᵀ Lobs⁻¹`,
    /// where `Q₁` is the top `m` rows of `Q`. `Sᵀ H S` is never formed.
    pub fn exact_posterior_with_limit(&self, limit: usize) -> Result<ExactPosterior> {
        let (m, n) = (self.m(), self.n());
        check_limit(n, limit)?;
        let s = self.gamma_pr.cholesky_factor();
        let l_obs = self.gamma_obs.cholesky_factor();
        let gd = self.g.to_dense();
        let singular = || Error::Factorization("singular posterior factor".into());
        let b = l_obs
            .solve_lower_triangular(&(&gd * s))
            .ok_or_else(singular)?;
        let mut stacked = DMatrix::zeros(m + n, n);
        stacked.rows_mut(0, m).copy_from(&b);
        stacked.rows_mut(m, n).fill_with_identity();
        let qr = stacked.qr();
        let r_inv = qr
            .r()
            .solve_upper_triangular(&DMatrix::identity(n, n))
            .ok_or_else(singular)?;
        let sr = s * r_inv;
        let gamma_pos = SpdMatrix::from_symmetrized(&sr * sr.transpose())?;
        let q1t = qr.q().rows(0, m).transpose();
        let obs_inv = l_obs
            .solve_lower_triangular(&DMatrix::identity(m, m))
            .ok_or_else(singular)?;
        let mean_map = &sr * q1t * obs_inv;
        let h = self.hessian_dense(limit)?;
        let precision = SpdMatrix::from_symmetrized(&h + self.gamma_pr.inverse())?;
        Ok(ExactPosterior {
            gamma_pos,
            precision,
            mean_map,
        })
    }

    /// `Γpr − Γpr Gᵀ Γy⁻¹ G Γpr`.
    pub fn woodbury_covariance(&self, limit: usize) -> Result<DMatrix<f64>> {
        let marg = self.marginal_covariance(limit)?;
        let gp = self.g.apply_matrix(self.gamma_pr.matrix());
        Ok(symmetrize(
            &(self.gamma_pr.matrix() - gp.tr_mul(&marg.gamma_y.solve_matrix(&gp))),
        ))
    }

    /// `Γy = Γobs + G Γpr Gᵀ`.
    pub fn marginal_covariance(&self, limit: usize) -> Result<MarginalCovariance> {
        check_limit(self.m(), limit)?;
        let gs = self.g.apply_matrix(self.gamma_pr.cholesky_factor());
        let gamma_y = SpdMatrix::from_symmetrized(self.gamma_obs.matrix() + &gs * gs.transpose())?;
        let sqrt = spd_sqrt(&gamma_y);
        Ok(MarginalCovariance { gamma_y, sqrt })
    }

    /// `count` prior draws as columns, `μpr + S z`.
    pub fn sample_prior(&self, count: usize, seed: u64) -> DMatrix<f64> {
        let z = rng::normal_matrix(&mut rng::stream(seed, PRIOR_STREAM), self.n(), count);
        let mut x = self.gamma_pr.cholesky_factor() * z;
        for mut c in x.column_iter_mut() {
            c += &self.prior_mean;
        }
        x
    }

    /// `y = G x + S_obs z`.
    pub fn simulate_data(&self, x_true: &DVector<f64>, seed: u64) -> Result<DVector<f64>> {
        if x_true.len() != self.n() {
            return Err(Error::shape(format!(
                "x has length {}, expected {}",
                x_true.len(),
                self.n()
            )));
        }
        Ok(self.g.apply(x_true) + self.noise(seed))
    }

    /// The noise realization `S_obs z` used by [`simulate_data`](Self::simulate_data).
    pub fn noise(&self, seed: u64) -> DVector<f64> {
        let z = rng::normal_vector(&mut rng::stream(seed, NOISE_STREAM), self.m());
        self.gamma_obs.cholesky_factor() * z
    }

    /// Short content hash of the model, used to tie approximations to the
    /// model they were built from. The forward operator enters through its
    /// action on a few fixed probe vectors.
    pub fn fingerprint(&self) -> String {
        self.fingerprint
            .get_or_init(|| self.compute_fingerprint())
            .clone()
    }

    fn compute_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.m() as u64).to_le_bytes());
        h.update((self.n() as u64).to_le_bytes());
        for v in self
            .gamma_pr
            .matrix()
            .iter()
            .chain(self.gamma_obs.matrix().iter())
        {
            h.update(v.to_le_bytes());
        }
        for v in self.prior_mean.iter() {
            h.update(v.to_le_bytes());
        }
        let probes = rng::normal_matrix(&mut rng::stream(0x9e37, 0), self.n(), 4);
        for v in self.g.apply_matrix(&probes).iter() {
            h.update(v.to_le_bytes());
        }
        h.finalize()
            .iter()
            .take(12)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Writes `forward.mtx`, `gamma_obs.mtx`, `gamma_pr.mtx`,
    /// `prior_mean.mtx` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, seed: Option<u64>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let forward_format = match self.g.to_stored() {
            MmMatrix::Dense(m) => {
                mmio::write_dense_file(&dir.join("forward.mtx"), &m, false)?;
                "array"
            }
            MmMatrix::Sparse(s) => {
                mmio::write_sparse_file(&dir.join("forward.mtx"), &s)?;
                "coordinate"
            }
        };
        write_spd(&dir.join("gamma_obs.mtx"), &self.gamma_obs)?;
        write_spd(&dir.join("gamma_pr.mtx"), &self.gamma_pr)?;
        let mean = DMatrix::from_column_slice(self.n(), 1, self.prior_mean.as_slice());
        mmio::write_dense_file(&dir.join("prior_mean.mtx"), &mean, false)?;
        let manifest = ModelManifest {
            schema_version: MODEL_SCHEMA_VERSION,
            label: self.label.clone(),
            m: self.m(),
            n: self.n(),
            forward_format: forward_format.into(),
            seed,
            fingerprint: self.fingerprint(),
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ModelManifest)> {
        let manifest: ModelManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let g: SharedOperator = match mmio::read_file(&dir.join("forward.mtx"))? {
            MmMatrix::Dense(m) => Arc::new(DenseOperator::new(m)),
            MmMatrix::Sparse(s) => Arc::new(s),
        };
        let gamma_obs = SpdMatrix::new(mmio::read_file(&dir.join("gamma_obs.mtx"))?.into_dense())?;
        let gamma_pr = SpdMatrix::new(mmio::read_file(&dir.join("gamma_pr.mtx"))?.into_dense())?;
        let mean = mmio::read_file(&dir.join("prior_mean.mtx"))?.into_dense();
        let model = Self::new(g, gamma_obs, gamma_pr)?
            .with_prior_mean(DVector::from_column_slice(mean.as_slice()))?
            .with_label(manifest.label.clone());
        if model.m() != manifest.m || model.n() != manifest.n {
            return Err(Error::Config(format!(
                "manifest declares {}x{} but the files hold {}x{}",
                manifest.m,
                manifest.n,
                model.m(),
                model.n()
            )));
        }
        Ok((model, manifest))
    }
}

const PRIOR_STREAM: u64 = 0x5052;
const NOISE_STREAM: u64 = 0x4e4f;
pub const MODEL_SCHEMA_VERSION: u32 = 1;

fn check_limit(dim: usize, limit: usize) -> Result<()> {
    if dim > limit {
        Err(Error::UseDenseFallback { dim, limit })
    } else {
        Ok(())
    }
}

fn write_spd(path: &Path, a: &SpdMatrix) -> Result<()> {
    let exact = a.matrix() == &a.matrix().transpose();
    mmio::write_dense_file(path, a.matrix(), exact)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelManifest {
    pub schema_version: u32,
    pub label: String,
    pub m: usize,
    pub n: usize,
    pub forward_format: String,
    pub seed: Option<u64>,
    pub fingerprint: String,
}

/// `x ↦ Gᵀ Γobs⁻¹ G x`.
#[derive(Clone, Debug)]
pub struct HessianOperator {
    g: SharedOperator,
    gamma_obs: Arc<SpdMatrix>,
}

impl LinearOperator for HessianOperator {
    fn nrows(&self) -> usize {
        self.g.ncols()
    }
    fn ncols(&self) -> usize {
        self.g.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.g
            .apply_transpose(&self.gamma_obs.solve(&self.g.apply(x)))
    }
    fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        self.apply(y)
    }
    fn apply_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.g
            .apply_transpose_matrix(&self.gamma_obs.solve_matrix(&self.g.apply_matrix(x)))
    }
    fn apply_transpose_matrix(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_matrix(y)
    }
}

#[derive(Clone, Debug)]
pub struct ExactPosterior {
    pub gamma_pos: SpdMatrix,
    /// `Γpos⁻¹ = H + Γpr⁻¹`.
    pub precision: SpdMatrix,
    /// `Γpos Gᵀ Γobs⁻¹`, n×m.
    pub mean_map: DMatrix<f64>,
}

impl ExactPosterior {
    /// `μpos(y)` for a model with prior mean `μpr`.
    pub fn mean(&self, model: &GaussianLinearModel, y: &DVector<f64>) -> DVector<f64> {
        model.prior_mean() + &self.mean_map * model.centered_data(y)
    }
}

#[derive(Clone, Debug)]
pub struct MarginalCovariance {
    pub gamma_y: SpdMatrix,
    pub sqrt: SquareRootFactor,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, seed: u64) -> SpdMatrix {
        let a = rng::normal_matrix(&mut rng::stream(seed, 1), n, n);
        SpdMatrix::from_symmetrized(&a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.3)
            .unwrap()
    }

    fn random_model(m: usize, n: usize, seed: u64) -> GaussianLinearModel {
        let g = rng::normal_matrix(&mut rng::stream(seed, 0), m, n);
        GaussianLinearModel::dense(g, random_spd(m, seed + 1), random_spd(n, seed + 2)).unwrap()
    }

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    #[test]
    fn hessian_cases() {
        let zero = GaussianLinearModel::dense(
            DMatrix::zeros(3, 2),
            SpdMatrix::identity(3),
            SpdMatrix::identity(2),
        )
        .unwrap();
        assert_eq!(zero.hessian().to_dense(), DMatrix::zeros(2, 2));
        let s2 = 0.25;
        let m = GaussianLinearModel::dense(
            DMatrix::identity(3, 3),
            SpdMatrix::scaled_identity(3, s2).unwrap(),
            SpdMatrix::identity(3),
        )
        .unwrap();
        assert!((m.hessian().to_dense() - DMatrix::identity(3, 3) / s2).norm() < 1e-14);

        let model = random_model(5, 7, 3);
        let gd = model.forward().to_dense();
        let oracle = gd.transpose() * model.gamma_obs().inverse() * &gd;
        assert!((model.hessian().to_dense() - &oracle).norm() < 1e-10 * oracle.norm());
        assert!((model.hessian_dense(100).unwrap() - &oracle).norm() < 1e-10 * oracle.norm());
    }

    #[test]
    fn posterior_without_data_is_the_prior() {
        let pr = random_spd(4, 9);
        let m =
            GaussianLinearModel::dense(DMatrix::zeros(2, 4), SpdMatrix::identity(2), pr.clone())
                .unwrap();
        let post = m.exact_posterior().unwrap();
        assert!((post.gamma_pos.matrix() - pr.matrix()).norm() < 1e-12);
        assert!(post.mean_map.norm() < 1e-14);
    }

    #[test]
    fn scalar_balance() {
        let m = GaussianLinearModel::dense(
            DMatrix::identity(3, 3),
            SpdMatrix::identity(3),
            SpdMatrix::identity(3),
        )
        .unwrap();
        let post = m.exact_posterior().unwrap();
        let half = DMatrix::identity(3, 3) * 0.5;
        assert!((post.gamma_pos.matrix() - &half).norm() < 1e-15);
        assert!((&post.mean_map - &half).norm() < 1e-15);
    }

    #[test]
    fn denoising_closed_form() {
        let s2 = [0.5, 2.0, 0.1, 1.0];
        let l2 = [4.0, 1.0, 0.3, 2.0];
        let m = GaussianLinearModel::dense(
            DMatrix::identity(4, 4),
            SpdMatrix::from_diagonal(&s2).unwrap(),
            SpdMatrix::from_diagonal(&l2).unwrap(),
        )
        .unwrap();
        let post = m.exact_posterior().unwrap();
        let expected: Vec<f64> = (0..4).map(|i| l2[i] * s2[i] / (s2[i] + l2[i])).collect();
        assert!((post.gamma_pos.matrix() - diag(&expected)).norm() < 1e-14);
    }

    #[test]
    fn woodbury_and_inverse_agree() {
        let model = random_model(6, 9, 21);
        let post = model.exact_posterior().unwrap();
        let wood = model.woodbury_covariance(100).unwrap();
        assert!((post.gamma_pos.matrix() - &wood).norm() < 1e-9 * wood.norm());
        let prod = post.gamma_pos.matrix() * post.precision.matrix();
        assert!((prod - DMatrix::identity(9, 9)).norm() < 1e-8);
    }

    #[test]
    fn marginal_covariance_matches_definition() {
        let model = random_model(5, 4, 31);
        let marg = model.marginal_covariance(100).unwrap();
        let gd = model.forward().to_dense();
        let oracle = model.gamma_obs().matrix() + &gd * model.gamma_pr().matrix() * gd.transpose();
        assert!((marg.gamma_y.matrix() - &oracle).norm() < 1e-10 * oracle.norm());
        assert!((marg.sqrt.reconstruct() - &oracle).norm() < 1e-10 * oracle.norm());
    }

    #[test]
    fn mean_map_minimizes_the_objective() {
        let model = random_model(5, 6, 41);
        let post = model.exact_posterior().unwrap();
        let y = rng::normal_vector(&mut rng::stream(42, 0), 5);
        let x = &post.mean_map * &y;
        let gd = model.forward().to_dense();
        let grad =
            gd.transpose() * model.gamma_obs().solve(&(&gd * &x - &y)) + model.gamma_pr().solve(&x);
        assert!(grad.norm() < 1e-8 * (1.0 + y.norm()));
    }

    #[test]
    fn dense_limit_is_enforced() {
        let model = random_model(3, 6, 5);
        assert!(matches!(
            model.exact_posterior_with_limit(5),
            Err(Error::UseDenseFallback { dim: 6, limit: 5 })
        ));
    }

    #[test]
    fn prior_sampling_statistics() {
        let m = GaussianLinearModel::dense(
            DMatrix::zeros(1, 2),
            SpdMatrix::identity(1),
            SpdMatrix::from_diagonal(&[4.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(m.sample_prior(0, 1).ncols(), 0);
        let x = m.sample_prior(100_000, 7);
        let cov = &x * x.transpose() / x.ncols() as f64;
        assert!((cov[(0, 0)] / 4.0 - 1.0).abs() < 0.05);
        assert!((cov[(1, 1)] - 1.0).abs() < 0.05);
        assert_eq!(x, m.sample_prior(100_000, 7));

        let id = GaussianLinearModel::dense(
            DMatrix::zeros(1, 3),
            SpdMatrix::identity(1),
            SpdMatrix::identity(3),
        )
        .unwrap();
        let x = id.sample_prior(100_000, 8);
        let cov = &x * x.transpose() / x.ncols() as f64;
        let err = crate::linalg::sym_eigenvalues(&(cov - DMatrix::identity(3, 3)))
            .iter()
            .fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!(err < 0.03);
    }

    #[test]
    fn simulated_data() {
        let obs = random_spd(3, 2);
        let m =
            GaussianLinearModel::dense(DMatrix::zeros(3, 2), obs.clone(), SpdMatrix::identity(2))
                .unwrap();
        let y = m
            .simulate_data(&DVector::from_vec(vec![1.0, 2.0]), 5)
            .unwrap();
        let z = rng::normal_vector(&mut rng::stream(5, NOISE_STREAM), 3);
        assert_eq!(y, obs.cholesky_factor() * z);

        let g = rng::normal_matrix(&mut rng::stream(3, 3), 3, 2);
        let quiet = GaussianLinearModel::dense(
            g.clone(),
            SpdMatrix::scaled_identity(3, 1e-20).unwrap(),
            SpdMatrix::identity(2),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3, -1.2]);
        assert!((quiet.simulate_data(&x, 1).unwrap() - &g * &x).norm() < 1e-8);
    }

    #[test]
    fn nonzero_prior_mean_shifts_the_data() {
        let base = random_model(4, 3, 61);
        let mu = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let shifted = base.clone().with_prior_mean(mu.clone()).unwrap();
        let post = shifted.exact_posterior().unwrap();
        let y = rng::normal_vector(&mut rng::stream(62, 0), 4);
        let mean = post.mean(&shifted, &y);
        // direct minimizer of the shifted objective
        let gd = shifted.forward().to_dense();
        let grad = gd.transpose() * shifted.gamma_obs().solve(&(&gd * &mean - &y))
            + shifted.gamma_pr().solve(&(&mean - &mu));
        assert!(grad.norm() < 1e-8);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = random_model(3, 4, 71).with_label("roundtrip");
        model.save(dir.path(), Some(71)).unwrap();
        let (back, manifest) = GaussianLinearModel::load(dir.path()).unwrap();
        assert_eq!(manifest.seed, Some(71));
        assert_eq!(manifest.fingerprint, model.fingerprint());
        assert_eq!(back.fingerprint(), model.fingerprint());
        assert_eq!(back.label(), "roundtrip");
    }
}
