//! Distances between SPD matrices and between the Gaussians they define.
//!
//! Losses of the form `Σ f(σᵢ)` use the generalized eigenvalues `σᵢ` of
//! the pencil `(a, b)`, i.e. `a v = σ b v`, computed densely by whitening
//! with the Cholesky factor of `b`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigenvalues, SpdMatrix};

fn same_dim(a: &SpdMatrix, b: &SpdMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "matrices are {}x{0} and {}x{1}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Eigenvalues of `b⁻¹ a`, non-increasing.
pub fn pencil_eigenvalues(a: &SpdMatrix, b: &SpdMatrix) -> Result<DVector<f64>> {
    same_dim(a, b)?;
    let l = b.cholesky_factor();
    let x = l
        .solve_lower_triangular(a.matrix())
        .ok_or_else(|| Error::Factorization("singular factor".into()))?;
    let m = l
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| Error::Factorization("singular factor".into()))?;
    Ok(sym_eigenvalues(&m))
}

/// `d_F(a, b) = (Σ ln² σᵢ)^{1/2}`.
pub fn forstner_distance(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    let sigma = pencil_eigenvalues(a, b)?;
    Ok(sigma.iter().map(|s| s.ln().powi(2)).sum::<f64>().sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Forstner,
    Kl,
    Hellinger,
    Custom,
}

/// A loss `L(a, b) = Σ f(σᵢ)` with `f` in the admissible class: `f` is
/// decreasing below 1, increasing above 1 and minimal at 1.
#[derive(Clone)]
pub struct LossSpec {
    kind: LossKind,
    name: String,
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LossSpec")
            .field("kind", &self.kind)
            .field("name", &self.name)
            .finish()
    }
}

/// `ln² x`.
pub fn forstner_f(x: f64) -> f64 {
    x.ln().powi(2)
}

/// `(x − ln x − 1) / 2`.
pub fn kl_f(x: f64) -> f64 {
    0.5 * (x - x.ln() - 1.0)
}

/// `ln(2 + x + 1/x) / 4`.
pub fn hellinger_f(x: f64) -> f64 {
    0.25 * (2.0 + x + 1.0 / x).ln()
}

impl LossSpec {
    pub fn forstner() -> Self {
        LossSpec {
            kind: LossKind::Forstner,
            name: "forstner".into(),
            f: Arc::new(forstner_f),
        }
    }

    pub fn kl() -> Self {
        LossSpec {
            kind: LossKind::Kl,
            name: "kl".into(),
            f: Arc::new(kl_f),
        }
    }

    pub fn hellinger() -> Self {
        LossSpec {
            kind: LossKind::Hellinger,
            name: "hellinger".into(),
            f: Arc::new(hellinger_f),
        }
    }

    /// Checks the class conditions on a logarithmic grid over
    /// `[1e-3, 1e3]`: `f′(x)(1 − x) < 0` away from 1 (by central
    /// differences) and `f(1) ≤ f(x)`.
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let name = name.into();
        let f1 = f(1.0);
        if !f1.is_finite() {
            return Err(Error::InvalidLossSpec(format!(
                "{name}: f(1) is not finite"
            )));
        }
        for k in 0..=240 {
            let x = 10f64.powf(-3.0 + 6.0 * k as f64 / 240.0);
            let fx = f(x);
            if !fx.is_finite() || fx < f1 {
                return Err(Error::InvalidLossSpec(format!(
                    "{name}: f({x:.4e}) = {fx} is below f(1) = {f1}"
                )));
            }
            if (x - 1.0).abs() < 1e-2 {
                continue;
            }
            let h = 1e-6 * x;
            let d = (f(x + h) - f(x - h)) / (2.0 * h);
            if !(d * (1.0 - x) < 0.0) {
                return Err(Error::InvalidLossSpec(format!(
                    "{name}: f′({x:.4e}) = {d:.4e} has the wrong sign"
                )));
            }
        }
        Ok(LossSpec {
            kind: LossKind::Custom,
            name,
            f: Arc::new(f),
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }
}

/// `Σ f(σᵢ)` over the eigenvalues of the pencil `(a, b)`.
pub fn class_loss(spec: &LossSpec, a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    let sigma = pencil_eigenvalues(a, b)?;
    Ok(sigma.iter().map(|s| spec.eval(*s)).sum())
}

/// `KL(N(μ₁, Σ₁) ‖ N(μ₂, Σ₂))` with `mean_shift = μ₁ − μ₂`:
/// `½[tr(Σ₂⁻¹Σ₁) − ℓ − ln(det Σ₁/det Σ₂) + dᵀ Σ₂⁻¹ d]`.
pub fn kl_gaussians(
    mean_shift: &DVector<f64>,
    sigma1: &SpdMatrix,
    sigma2: &SpdMatrix,
) -> Result<f64> {
    same_dim(sigma1, sigma2)?;
    check_mean(mean_shift, sigma1)?;
    let l = sigma1.dim() as f64;
    let trace = sigma2.solve_matrix(sigma1.matrix()).trace();
    let logdet = sigma1.log_det() - sigma2.log_det();
    let quad = mean_shift.dot(&sigma2.solve(mean_shift));
    Ok((0.5 * (trace - l - logdet + quad)).max(0.0))
}

fn check_mean(mean: &DVector<f64>, s: &SpdMatrix) -> Result<()> {
    if mean.len() != s.dim() {
        return Err(Error::shape(format!(
            "mean has length {}, expected {}",
            mean.len(),
            s.dim()
        )));
    }
    Ok(())
}

/// Hellinger distance between `N(μ₁, Σ₁)` and `N(μ₂, Σ₂)`,
/// `mean_shift = μ₁ − μ₂`, from determinants:
/// `d² = 1 − |Σ₁|^¼ |Σ₂|^¼ / |½(Σ₁+Σ₂)|^½ · exp(−⅛ dᵀ(½(Σ₁+Σ₂))⁻¹d)`.
pub fn hellinger_gaussians(
    mean_shift: &DVector<f64>,
    sigma1: &SpdMatrix,
    sigma2: &SpdMatrix,
) -> Result<f64> {
    same_dim(sigma1, sigma2)?;
    check_mean(mean_shift, sigma1)?;
    let avg = SpdMatrix::from_symmetrized((sigma1.matrix() + sigma2.matrix()) * 0.5)?;
    let log_bc = 0.25 * sigma1.log_det() + 0.25 * sigma2.log_det()
        - 0.5 * avg.log_det()
        - 0.125 * mean_shift.dot(&avg.solve(mean_shift));
    Ok((-log_bc.exp_m1()).max(0.0).sqrt())
}

/// Same distance (common mean) from the pencil eigenvalues `σᵢ` of
/// `(Σ₁, Σ₂)`: `d² = 1 − 2^{ℓ/2} Π σᵢ^¼ (1+σᵢ)^{-½}`.
pub fn hellinger_from_eigenvalues(sigma1: &SpdMatrix, sigma2: &SpdMatrix) -> Result<f64> {
    Ok(hellinger_from_pencil(
        pencil_eigenvalues(sigma1, sigma2)?.as_slice(),
    ))
}

/// Common-mean Hellinger distance from given pencil eigenvalues.
pub fn hellinger_from_pencil(sigma: &[f64]) -> f64 {
    let l = sigma.len() as f64;
    let log_bc = 0.5 * l * std::f64::consts::LN_2
        + sigma
            .iter()
            .map(|s| 0.25 * s.ln() - 0.5 * (1.0 + s).ln())
            .sum::<f64>();
    (-log_bc.exp_m1()).max(0.0).sqrt()
}

/// `‖a − b‖_F`.
pub fn frobenius_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a - b).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_spd(n: usize, seed: u64) -> SpdMatrix {
        let a = rng::normal_matrix(&mut rng::stream(seed, 3), n, n);
        SpdMatrix::from_symmetrized(&a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.2)
            .unwrap()
    }

    #[test]
    fn forstner_basic_values() {
        let a = random_spd(5, 1);
        assert!(forstner_distance(&a, &a).unwrap() < 1e-12);
        let n = 4;
        let e2 = SpdMatrix::scaled_identity(n, 1f64.exp().powi(2)).unwrap();
        let d = forstner_distance(&SpdMatrix::identity(n), &e2).unwrap();
        assert!((d - 2.0 * (n as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn forstner_congruence_and_symmetry() {
        let a = random_spd(6, 2);
        let b = random_spd(6, 3);
        let m = rng::normal_matrix(&mut rng::stream(4, 0), 6, 6);
        let ma = SpdMatrix::from_symmetrized(&m * a.matrix() * m.transpose()).unwrap();
        let mb = SpdMatrix::from_symmetrized(&m * b.matrix() * m.transpose()).unwrap();
        let d = forstner_distance(&a, &b).unwrap();
        assert!((d - forstner_distance(&ma, &mb).unwrap()).abs() < 1e-8);
        assert!((d - forstner_distance(&b, &a).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn class_loss_with_log_square_is_forstner_squared() {
        let a = random_spd(5, 5);
        let b = random_spd(5, 6);
        let d = forstner_distance(&a, &b).unwrap();
        assert!((class_loss(&LossSpec::forstner(), &a, &b).unwrap() - d * d).abs() < 1e-10);
        assert!(class_loss(&LossSpec::forstner(), &a, &a).unwrap() < 1e-20);
    }

    #[test]
    fn kl_closed_form() {
        let zero = DVector::zeros(1);
        let two = SpdMatrix::from_diagonal(&[2.0]).unwrap();
        let one = SpdMatrix::identity(1);
        let expected = 0.5 * (2.0 - 1.0 - 2f64.ln());
        assert!((kl_gaussians(&zero, &two, &one).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.15343).abs() < 1e-5);
        assert_eq!(kl_gaussians(&zero, &two, &two).unwrap(), 0.0);

        let a = random_spd(5, 7);
        let b = random_spd(5, 8);
        let z = DVector::zeros(5);
        let kl = kl_gaussians(&z, &a, &b).unwrap();
        assert!((kl - class_loss(&LossSpec::kl(), &a, &b).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn hellinger_paths_agree() {
        let zero = DVector::zeros(1);
        let s1 = SpdMatrix::identity(1);
        let s4 = SpdMatrix::from_diagonal(&[4.0]).unwrap();
        // |1|^¼ |4|^¼ / |2.5|^½
        let d2 = 1.0 - 4f64.powf(0.25) / 2.5f64.sqrt();
        assert!((hellinger_gaussians(&zero, &s1, &s4).unwrap() - d2.sqrt()).abs() < 1e-15);
        assert_eq!(hellinger_gaussians(&zero, &s4, &s4).unwrap(), 0.0);

        for seed in 0..10 {
            let a = random_spd(6, 10 + seed);
            let b = random_spd(6, 40 + seed);
            let det = hellinger_gaussians(&DVector::zeros(6), &a, &b).unwrap();
            let eig = hellinger_from_eigenvalues(&a, &b).unwrap();
            assert!((det * det - eig * eig).abs() < 1e-10);
            assert!((0.0..=1.0).contains(&det));
        }
    }

    #[test]
    fn hellinger_surrogate_is_monotone_in_the_distance() {
        let spec = LossSpec::hellinger();
        let mut pairs: Vec<(f64, f64)> = (0..50)
            .map(|s| {
                let a = random_spd(4, 100 + s);
                let b = random_spd(4, 200 + s);
                let l = class_loss(&spec, &a, &b).unwrap();
                let d = hellinger_gaussians(&DVector::zeros(4), &a, &b).unwrap();
                // d² = 1 − 2^{ℓ/2} e^{−L}
                assert!((d * d - (1.0 - 4.0 * (-l).exp())).abs() < 1e-10);
                (l, d)
            })
            .collect();
        pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1 + 1e-12));
    }

    #[test]
    fn custom_losses_are_validated() {
        assert!(LossSpec::custom("ln2", forstner_f).is_ok());
        assert!(LossSpec::custom("kl", kl_f).is_ok());
        assert!(LossSpec::custom("hell", hellinger_f).is_ok());
        assert!(matches!(
            LossSpec::custom("frob", |x: f64| (x - 2.0).powi(2)),
            Err(Error::InvalidLossSpec(_))
        ));
        assert!(matches!(
            LossSpec::custom("lin", |x: f64| x),
            Err(Error::InvalidLossSpec(_))
        ));
    }

    #[test]
    fn frobenius_values() {
        let a = DMatrix::from_element(1, 1, 3.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(frobenius_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(frobenius_distance(&a, &a).unwrap(), 0.0);
        assert!(frobenius_distance(&a, &DMatrix::zeros(2, 1)).is_err());
        let x = rng::normal_matrix(&mut rng::stream(1, 1), 4, 3);
        let y = rng::normal_matrix(&mut rng::stream(1, 2), 4, 3);
        let oracle: f64 = x
            .iter()
            .zip(y.iter())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        assert!((frobenius_distance(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn inversion_invariance() {
        let a = random_spd(5, 300);
        let b = random_spd(5, 301);
        let ai = SpdMatrix::from_symmetrized(a.inverse()).unwrap();
        let bi = SpdMatrix::from_symmetrized(b.inverse()).unwrap();
        let d = forstner_distance(&a, &b).unwrap();
        assert!((d - forstner_distance(&ai, &bi).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn scaling_grows_both_ways() {
        let a = random_spd(4, 400);
        let d: Vec<f64> = (-3..=3)
            .map(|k| {
                let s = SpdMatrix::from_symmetrized(a.matrix() * 10f64.powi(k)).unwrap();
                forstner_distance(&a, &s).unwrap()
            })
            .collect();
        assert!(d[3] < 1e-12);
        assert!(d[..3].windows(2).all(|w| w[0] > w[1]));
        assert!(d[3..].windows(2).all(|w| w[0] < w[1]));
    }
}
