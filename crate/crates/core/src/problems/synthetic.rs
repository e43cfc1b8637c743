use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseOperator, SpdMatrix};
use crate::model::GaussianLinearModel;
use crate::rng;

/// `λ_k = λ₀ / k^α + τ` for `k = 1, …, n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub lambda0: f64,
    pub alpha: f64,
    pub tau: f64,
}

impl Spectrum {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0)
            || !(self.tau >= 0.0)
            || !self.alpha.is_finite()
            || !self.tau.is_finite()
        {
            return Err(Error::Config(format!(
                "invalid spectrum {self:?}: need λ₀ > 0, τ ≥ 0"
            )));
        }
        Ok(())
    }

    pub fn values(&self, n: usize) -> Vec<f64> {
        (1..=n)
            .map(|k| self.lambda0 / (k as f64).powf(self.alpha) + self.tau)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpectrumConfig {
    pub dim: usize,
    pub hessian: Spectrum,
    pub prior: Spectrum,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticProblem {
    pub model: GaussianLinearModel,
    pub hessian_spectrum: Vec<f64>,
    pub prior_spectrum: Vec<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

const U_STREAM: u64 = 0x5501;
const V_STREAM: u64 = 0x5602;

/// `H = U Λ Uᵀ` and `Γpr = V Λ̃ Vᵀ` with independent Haar-distributed `U`
/// and `V`. The Hessian is realized by `G = Λ^{1/2} Uᵀ` with `Γobs = I`.
pub fn make_synthetic(cfg: &SyntheticSpectrumConfig) -> Result<SyntheticProblem> {
    if cfg.dim == 0 {
        return Err(Error::Config("synthetic dimension must be positive".into()));
    }
    cfg.hessian.validate()?;
    cfg.prior.validate()?;
    let n = cfg.dim;
    let lam = cfg.hessian.values(n);
    let lam_pr = cfg.prior.values(n);
    let u = haar_orthogonal(&mut rng::stream(cfg.seed, U_STREAM), n);
    let v = haar_orthogonal(&mut rng::stream(cfg.seed, V_STREAM), n);
    let mut g = u.transpose();
    for (i, l) in lam.iter().enumerate() {
        g.row_mut(i).scale_mut(l.sqrt());
    }
    let gamma_pr = SpdMatrix::from_symmetrized(
        &v * DMatrix::from_diagonal(&DVector::from_vec(lam_pr.clone())) * v.transpose(),
    )?;
    let model = GaussianLinearModel::new(
        Arc::new(DenseOperator::new(g)),
        SpdMatrix::identity(n),
        gamma_pr,
    )?
    .with_label("synthetic");
    Ok(SyntheticProblem {
        model,
        hessian_spectrum: lam,
        prior_spectrum: lam_pr,
        u,
        v,
    })
}

/// Orthogonal factor of a standard Gaussian matrix by Gram–Schmidt, which
/// gives `R` a positive diagonal and so a Haar-distributed `Q`.
pub fn haar_orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
    gram_schmidt_qr(&rng::normal_matrix(rng, n, n)).0
}

/// Modified Gram–Schmidt with one reorthogonalization pass; `R` has a
/// non-negative diagonal.
pub fn gram_schmidt_qr(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    let mut q = a.clone();
    let mut r = DMatrix::zeros(n, n);
    for j in 0..n {
        for _ in 0..2 {
            for i in 0..j {
                let c = q.column(i).dot(&q.column(j));
                r[(i, j)] += c;
                let qi = q.column(i).into_owned();
                q.column_mut(j).axpy(-c, &qi, 1.0);
            }
        }
        let norm = q.column(j).norm();
        r[(j, j)] = norm;
        if norm > 0.0 {
            q.column_mut(j).scale_mut(1.0 / norm);
        }
    }
    debug_assert_eq!(q.nrows(), m);
    (q, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, h: (f64, f64, f64), p: (f64, f64, f64), seed: u64) -> SyntheticSpectrumConfig {
        SyntheticSpectrumConfig {
            dim: n,
            hessian: Spectrum {
                lambda0: h.0,
                alpha: h.1,
                tau: h.2,
            },
            prior: Spectrum {
                lambda0: p.0,
                alpha: p.1,
                tau: p.2,
            },
            seed,
        }
    }

    #[test]
    fn realizes_the_prescribed_spectra() {
        let p = make_synthetic(&cfg(20, (500.0, 0.345, 1e-6), (1.0, 2.0, 1e-6), 3)).unwrap();
        let h = p.model.hessian_dense(100).unwrap();
        let expected = &p.u
            * DMatrix::from_diagonal(&DVector::from_vec(p.hessian_spectrum.clone()))
            * p.u.transpose();
        assert!((&h - &expected).norm() < 1e-10 * expected.norm());
        let eig = crate::linalg::sym_eigenvalues(p.model.gamma_pr().matrix());
        for (a, b) in eig.iter().zip(&p.prior_spectrum) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!((p.u.tr_mul(&p.u) - DMatrix::identity(20, 20)).norm() < 1e-10);
        assert!((p.v.tr_mul(&p.v) - DMatrix::identity(20, 20)).norm() < 1e-10);
        assert_eq!(p.model.forward().nrows(), 20);
    }

    #[test]
    fn same_seed_same_model() {
        let c = cfg(8, (2.0, 1.0, 0.1), (1.0, 0.5, 0.0), 11);
        let a = make_synthetic(&c).unwrap();
        let b = make_synthetic(&c).unwrap();
        assert_eq!(a.model.gamma_pr().matrix(), b.model.gamma_pr().matrix());
        assert_eq!(
            a.model.hessian_dense(100).unwrap(),
            b.model.hessian_dense(100).unwrap()
        );
        let d = make_synthetic(&SyntheticSpectrumConfig { seed: 12, ..c }).unwrap();
        assert_ne!(a.model.gamma_pr().matrix(), d.model.gamma_pr().matrix());
    }

    #[test]
    fn gram_schmidt_factorizes() {
        let a = rng::normal_matrix(&mut rng::stream(5, 0), 7, 5);
        let (q, r) = gram_schmidt_qr(&a);
        assert!((&q * &r - &a).norm() < 1e-12);
        assert!((q.tr_mul(&q) - DMatrix::identity(5, 5)).norm() < 1e-13);
        for i in 0..5 {
            assert!(r[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn first_column_is_spherical() {
        let n = 4;
        let draws = 1000;
        let mut r = rng::stream(17, 0);
        let mut mean = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for _ in 0..draws {
            let q = haar_orthogonal(&mut r, n);
            let c = q.column(0).into_owned();
            mean += &c;
            second += &c * c.transpose();
        }
        mean /= draws as f64;
        second /= draws as f64;
        // E[u] = 0 and E[u uᵀ] = I/n; standard errors are about 0.016
        assert!(mean.amax() < 0.1, "{mean}");
        assert!((second - DMatrix::identity(n, n) / n as f64).amax() < 0.05);
    }

    #[test]
    fn invalid_spectra_are_rejected() {
        assert!(make_synthetic(&cfg(4, (0.0, 1.0, 0.0), (1.0, 1.0, 0.0), 1)).is_err());
        assert!(make_synthetic(&cfg(4, (1.0, 1.0, -1.0), (1.0, 1.0, 0.0), 1)).is_err());
        assert!(make_synthetic(&cfg(0, (1.0, 1.0, 0.0), (1.0, 1.0, 0.0), 1)).is_err());
    }
}
