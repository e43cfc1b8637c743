use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::mmio::MmMatrix;
use crate::error::{Error, Result};
use crate::rng;

/// A linear map known through its action and the action of its transpose.
///
/// Implementations must be reentrant: `apply` may be called from several
/// threads at once.
pub trait LinearOperator: Send + Sync + Debug {
    /// Output dimension.
    fn nrows(&self) -> usize;
    /// Input dimension.
    fn ncols(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
    fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64>;

    /// Column-by-column action on a matrix. Columns are independent, so the
    /// result does not depend on how the work is scheduled.
    fn apply_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = (0..x.ncols())
            .into_par_iter()
            .map(|j| self.apply(&x.column(j).into_owned()))
            .collect();
        columns_to_matrix(self.nrows(), &cols)
    }

    fn apply_transpose_matrix(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = (0..y.ncols())
            .into_par_iter()
            .map(|j| self.apply_transpose(&y.column(j).into_owned()))
            .collect();
        columns_to_matrix(self.ncols(), &cols)
    }

    /// Dense materialization by applying to the identity.
    fn to_dense(&self) -> DMatrix<f64> {
        self.apply_matrix(&DMatrix::identity(self.ncols(), self.ncols()))
    }

    /// Storage form used when the operator is written to disk.
    fn to_stored(&self) -> MmMatrix {
        MmMatrix::Dense(self.to_dense())
    }
}

pub(crate) fn columns_to_matrix(rows: usize, cols: &[DVector<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    out
}

pub type SharedOperator = Arc<dyn LinearOperator>;

/// Largest relative adjoint defect `|⟨Au,v⟩ − ⟨u,Aᵀv⟩| / (‖u‖‖v‖)` over
/// `pairs` random pairs.
pub fn adjoint_defect(op: &dyn LinearOperator, pairs: usize, seed: u64) -> f64 {
    let mut worst = 0.0_f64;
    for k in 0..pairs {
        let mut r = rng::stream(seed, k as u64);
        let u = rng::normal_vector(&mut r, op.ncols());
        let v = rng::normal_vector(&mut r, op.nrows());
        let lhs = op.apply(&u).dot(&v);
        let rhs = u.dot(&op.apply_transpose(&v));
        worst = worst.max((lhs - rhs).abs() / (u.norm() * v.norm()));
    }
    worst
}

/// A dense matrix viewed as an operator.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        DenseOperator { matrix }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn nrows(&self) -> usize {
        self.matrix.nrows()
    }
    fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }
    fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        self.matrix.tr_mul(y)
    }
    fn apply_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.matrix * x
    }
    fn apply_transpose_matrix(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        self.matrix.tr_mul(y)
    }
    fn to_dense(&self) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(i, j, _) in &sorted {
            if i >= nrows || j >= ncols {
                return Err(Error::shape(format!(
                    "triplet ({i}, {j}) outside {nrows}x{ncols} matrix"
                )));
            }
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in sorted {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(j);
            values.push(v);
            indptr[i + 1] += 1;
            last = Some((i, j));
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        Ok(SparseMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entries of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|(_, v)| v).sum()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.nrows)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .collect()
    }
}

impl LinearOperator for SparseMatrix {
    fn nrows(&self) -> usize {
        self.nrows
    }
    fn ncols(&self) -> usize {
        self.ncols
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.nrows, |i, _| self.row(i).map(|(j, v)| v * x[j]).sum())
    }
    fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            let yi = y[i];
            for (j, v) in self.row(i) {
                out[j] += v * yi;
            }
        }
        out
    }
    fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            out[(i, j)] += v;
        }
        out
    }
    fn to_stored(&self) -> MmMatrix {
        MmMatrix::Sparse(self.clone())
    }
}

/// `A ∘ B`.
#[derive(Clone, Debug)]
pub struct Composed {
    outer: SharedOperator,
    inner: SharedOperator,
}

impl Composed {
    pub fn new(outer: SharedOperator, inner: SharedOperator) -> Result<Self> {
        if outer.ncols() != inner.nrows() {
            return Err(Error::shape(format!(
                "cannot compose {}x{} with {}x{}",
                outer.nrows(),
                outer.ncols(),
                inner.nrows(),
                inner.ncols()
            )));
        }
        Ok(Composed { outer, inner })
    }
}

impl LinearOperator for Composed {
    fn nrows(&self) -> usize {
        self.outer.nrows()
    }
    fn ncols(&self) -> usize {
        self.inner.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.outer.apply(&self.inner.apply(x))
    }
    fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        self.inner.apply_transpose(&self.outer.apply_transpose(y))
    }
}
