use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check on construction.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Lower Cholesky factor `L` with `A = L Lᵀ`.
///
/// Fails with [`Error::NotPositiveDefinite`] naming the first pivot that is
/// not strictly positive.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape(format!(
            "cholesky of non-square {}x{} matrix",
            n,
            a.ncols()
        )));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        // column j below (and on) the diagonal: a[j.., j] - L[j.., ..j] L[j, ..j]ᵀ
        let mut col: DVector<f64> = a.view((j, j), (n - j, 1)).column(0).into_owned();
        if j > 0 {
            let left = l.view((j, 0), (n - j, j));
            let row = l.view((j, 0), (1, j)).transpose();
            col -= left * row;
        }
        let d = col[0];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let s = d.sqrt();
        l[(j, j)] = s;
        for i in 1..(n - j) {
            l[(j + i, j)] = col[i] / s;
        }
    }
    Ok(l)
}

pub(crate) fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub(crate) fn symmetry_defect(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// A dense symmetric positive definite matrix together with its Cholesky
/// factor. Immutable after construction.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    matrix: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl SpdMatrix {
    /// Checks symmetry (relative to the largest entry) and positive
    /// definiteness.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::shape(format!(
                "SPD matrix must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let scale = max_abs(&matrix);
        let defect = symmetry_defect(&matrix);
        if defect > SYMMETRY_TOL * scale {
            return Err(Error::shape(format!(
                "matrix is not symmetric (defect {defect:.3e}, scale {scale:.3e})"
            )));
        }
        let chol = cholesky_lower(&matrix)?;
        Ok(SpdMatrix { matrix, chol })
    }

    /// Averages with the transpose first; for matrices produced by
    /// floating-point products that are symmetric only up to roundoff.
    pub fn from_symmetrized(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::shape("SPD matrix must be square"));
        }
        Self::new(symmetrize(&matrix))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n]).expect("identity is SPD")
    }

    pub fn scaled_identity(n: usize, value: f64) -> Result<Self> {
        Self::from_diagonal(&vec![value; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// Lower Cholesky factor.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    /// `A⁻¹ b` via the cached factor.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let z = self
            .chol
            .solve_lower_triangular(b)
            .expect("nonsingular factor");
        self.chol
            .tr_solve_lower_triangular(&z)
            .expect("nonsingular factor")
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self
            .chol
            .solve_lower_triangular(b)
            .expect("nonsingular factor");
        self.chol
            .tr_solve_lower_triangular(&z)
            .expect("nonsingular factor")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.solve_matrix(&DMatrix::identity(self.dim(), self.dim())))
    }

    /// `ln det A` from the factor diagonal.
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// How a square root factor was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorKind {
    /// Lower-triangular Cholesky factor.
    LowerCholesky,
    /// Any other invertible factor (e.g. the inverse of an SPDE operator).
    General,
}

/// A left square root `S` with `S Sᵀ` equal to some SPD matrix.
#[derive(Clone, Debug)]
pub struct SquareRootFactor {
    factor: DMatrix<f64>,
    kind: FactorKind,
}

impl SquareRootFactor {
    pub fn general(factor: DMatrix<f64>) -> Result<Self> {
        if factor.nrows() != factor.ncols() {
            return Err(Error::shape("square root factor must be square"));
        }
        Ok(SquareRootFactor {
            factor,
            kind: FactorKind::General,
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn kind(&self) -> FactorKind {
        self.kind
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.factor * x
    }

    pub fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        self.factor.tr_mul(x)
    }

    /// `S⁻¹ b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self.kind {
            FactorKind::LowerCholesky => self
                .factor
                .solve_lower_triangular(b)
                .ok_or_else(|| Error::Factorization("singular triangular factor".into())),
            FactorKind::General => self
                .factor
                .clone()
                .lu()
                .solve(b)
                .ok_or_else(|| Error::Factorization("singular square root factor".into())),
        }
    }

    /// `S⁻ᵀ b`.
    pub fn solve_transpose(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self.kind {
            FactorKind::LowerCholesky => self
                .factor
                .tr_solve_lower_triangular(b)
                .ok_or_else(|| Error::Factorization("singular triangular factor".into())),
            FactorKind::General => self
                .factor
                .transpose()
                .lu()
                .solve(b)
                .ok_or_else(|| Error::Factorization("singular square root factor".into())),
        }
    }

    /// `S Sᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        symmetrize(&(&self.factor * self.factor.transpose()))
    }
}

/// Cholesky square root `S` of `a`, so that `S Sᵀ = a`.
pub fn spd_sqrt(a: &SpdMatrix) -> SquareRootFactor {
    SquareRootFactor {
        factor: a.cholesky_factor().clone(),
        kind: FactorKind::LowerCholesky,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let a = rng::normal_matrix(&mut rng::stream(seed, 0), n, n);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let s = spd_sqrt(&SpdMatrix::identity(3));
        assert_eq!(s.factor(), &DMatrix::<f64>::identity(3, 3));
        let s = spd_sqrt(&SpdMatrix::from_diagonal(&[4.0, 1.0, 0.25]).unwrap());
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 0.5]));
        assert!((s.factor() - expected).norm() < 1e-15);
        assert_eq!(s.kind(), FactorKind::LowerCholesky);
    }

    #[test]
    fn sqrt_reconstructs_random_spd() {
        let a = random_spd(5, 11);
        let s = spd_sqrt(&SpdMatrix::new(a.clone()).unwrap());
        // dense multiply oracle
        let mut recon = DMatrix::<f64>::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                recon[(i, j)] = (0..5)
                    .map(|k| s.factor()[(i, k)] * s.factor()[(j, k)])
                    .sum();
            }
        }
        assert!((recon - &a).norm() / a.norm() < 1e-10);
    }

    #[test]
    fn indefinite_matrix_reports_pivot() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 2.0, 1.0]);
        match SpdMatrix::new(a) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 2),
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn asymmetric_matrix_is_a_shape_error() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert!(matches!(SpdMatrix::new(a), Err(Error::Shape(_))));
    }

    #[test]
    fn solve_and_log_det() {
        let a = random_spd(6, 3);
        let spd = SpdMatrix::new(a.clone()).unwrap();
        let b = rng::normal_vector(&mut rng::stream(4, 0), 6);
        let x = spd.solve(&b);
        assert!((&a * x - &b).norm() < 1e-10 * b.norm() * a.norm());
        let det = a.clone().lu().determinant();
        assert!((spd.log_det() - det.ln()).abs() < 1e-10);
    }

    #[test]
    fn general_factor_solves() {
        let f = random_spd(4, 9) + DMatrix::from_fn(4, 4, |i, j| (i as f64) - (j as f64));
        let s = SquareRootFactor::general(f.clone()).unwrap();
        let b = DMatrix::identity(4, 4);
        let inv = s.solve(&b).unwrap();
        assert!((&f * inv - &b).norm() < 1e-10);
        let inv_t = s.solve_transpose(&b).unwrap();
        assert!((f.transpose() * inv_t - &b).norm() < 1e-10);
    }
}
