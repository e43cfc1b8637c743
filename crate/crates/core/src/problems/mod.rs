//! Model generators for the three experiment families: controlled-spectra
//! random pencils, X-ray tomography and heat-equation initial-condition
//! inversion, together with the SPDE prior they share.

mod heat;
mod spde;
mod synthetic;
mod tomography;

pub use heat::{make_heat, Conductivity, HeatForward, HeatProblem, HeatProblemConfig};
pub use spde::{make_spde_prior, SpdePrior, SpdePriorConfig, TensorField};
pub use synthetic::{
    gram_schmidt_qr, haar_orthogonal, make_synthetic, Spectrum, SyntheticProblem,
    SyntheticSpectrumConfig,
};
pub use tomography::{
    make_tomography, siddon_row, AngularRange, Disk, Phantom, Ray, TomographyProblem,
    TomographySetup,
};

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::error::{Error, Result};
use crate::linalg::{LinearOperator, SparseMatrix};

/// Square grid of `size × size` nodes at `origin + (i h, j h)`, numbered
/// `i + size · j` with `i` along the first coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub size: usize,
    pub spacing: f64,
    pub origin: f64,
}

impl Grid {
    /// Nodes on the corners of `[0,1]²` and everything in between.
    pub fn vertices(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!(
                "grid needs at least 2 nodes per side, got {size}"
            )));
        }
        Ok(Grid {
            size,
            spacing: 1.0 / (size - 1) as f64,
            origin: 0.0,
        })
    }

    /// Centers of the `size × size` cells of `[0,1]²`.
    pub fn cell_centers(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!(
                "grid needs at least 2 cells per side, got {size}"
            )));
        }
        let h = 1.0 / size as f64;
        Ok(Grid {
            size,
            spacing: h,
            origin: 0.5 * h,
        })
    }

    pub fn len(&self) -> usize {
        self.size * self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.size * j
    }

    pub fn point(&self, k: usize) -> (f64, f64) {
        let (i, j) = (k % self.size, k / self.size);
        (
            self.origin + i as f64 * self.spacing,
            self.origin + j as f64 * self.spacing,
        )
    }

    /// Lumped bilinear mass: `h²` times the share of adjacent elements.
    pub fn lumped_mass(&self) -> DVector<f64> {
        let n = self.size;
        let h2 = self.spacing * self.spacing;
        DVector::from_fn(self.len(), |k, _| {
            let (i, j) = (k % n, k / n);
            let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            h2 * wi * wj
        })
    }

    /// Bilinear interpolation weights of the point `(x, y)`, clamped to the
    /// grid.
    pub fn interpolation(&self, x: f64, y: f64) -> Vec<(usize, f64)> {
        let last = (self.size - 1) as f64;
        let u = ((x - self.origin) / self.spacing).clamp(0.0, last);
        let v = ((y - self.origin) / self.spacing).clamp(0.0, last);
        let i = (u.floor() as usize).min(self.size - 2);
        let j = (v.floor() as usize).min(self.size - 2);
        let (a, b) = (u - i as f64, v - j as f64);
        let mut out = Vec::with_capacity(4);
        for (di, dj, w) in [
            (0, 0, (1.0 - a) * (1.0 - b)),
            (1, 0, a * (1.0 - b)),
            (0, 1, (1.0 - a) * b),
            (1, 1, a * b),
        ] {
            if w != 0.0 {
                out.push((self.index(i + di, j + dj), w));
            }
        }
        out
    }
}

/// Bilinear stiffness `∫ ∇φᵢᵀ C(s) ∇φⱼ` with 2×2 Gauss quadrature on each
/// element; natural (zero-flux) boundary.
pub(crate) fn q1_stiffness(
    grid: &Grid,
    tensor: impl Fn(f64, f64) -> Matrix2<f64>,
) -> Result<SparseMatrix> {
    let n = grid.size;
    let h = grid.spacing;
    let g = 0.5 / 3f64.sqrt();
    let points = [0.5 - g, 0.5 + g];
    let mut triplets = Vec::with_capacity(16 * (n - 1) * (n - 1));
    for ej in 0..n - 1 {
        for ei in 0..n - 1 {
            let nodes = [
                grid.index(ei, ej),
                grid.index(ei + 1, ej),
                grid.index(ei, ej + 1),
                grid.index(ei + 1, ej + 1),
            ];
            let mut ke = [[0.0; 4]; 4];
            for &xi in &points {
                for &eta in &points {
                    let grads = [
                        [-(1.0 - eta), -(1.0 - xi)],
                        [1.0 - eta, -xi],
                        [-eta, 1.0 - xi],
                        [eta, xi],
                    ];
                    let x = grid.origin + (ei as f64 + xi) * h;
                    let y = grid.origin + (ej as f64 + eta) * h;
                    let c = tensor(x, y);
                    for a in 0..4 {
                        let ca = [
                            c[(0, 0)] * grads[a][0] + c[(0, 1)] * grads[a][1],
                            c[(1, 0)] * grads[a][0] + c[(1, 1)] * grads[a][1],
                        ];
                        for b in 0..4 {
                            ke[a][b] += 0.25 * (ca[0] * grads[b][0] + ca[1] * grads[b][1]);
                        }
                    }
                }
            }
            for a in 0..4 {
                for b in 0..4 {
                    triplets.push((nodes[a], nodes[b], ke[a][b]));
                }
            }
        }
    }
    SparseMatrix::from_triplets(grid.len(), grid.len(), &triplets)
}

/// Cholesky factor of a symmetric positive definite band matrix, stored by
/// rows as the `bw + 1` entries left of and on the diagonal.
#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &SparseMatrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::shape(format!(
                "banded factor needs a square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let mut bw = 0;
        for i in 0..n {
            for (j, _) in a.row(i) {
                bw = bw.max(i.abs_diff(j));
            }
        }
        let w = bw + 1;
        let mut data = vec![0.0; n * w];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    data[i * w + (bw - (i - j))] += v;
                }
            }
        }
        // L[i][j] lives at data[i*w + bw - (i-j)]
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut s = data[i * w + bw - (i - j)];
                let klo = lo.max(j.saturating_sub(bw));
                for k in klo..j {
                    s -= data[i * w + bw - (i - k)] * data[j * w + bw - (j - k)];
                }
                if j == i {
                    if !(s > 0.0) {
                        return Err(Error::NotPositiveDefinite { pivot: i });
                    }
                    data[i * w + bw] = s.sqrt();
                } else {
                    data[i * w + bw - (i - j)] = s / data[j * w + bw];
                }
            }
        }
        Ok(BandedCholesky { n, bw, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn l(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.bw + 1) + self.bw - (i - j)]
    }

    /// Solves `L z = b` in place.
    pub fn solve_lower(&self, b: &mut DVector<f64>) {
        for i in 0..self.n {
            let mut s = b[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.l(i, k) * b[k];
            }
            b[i] = s / self.l(i, i);
        }
    }

    /// Solves `Lᵀ z = b` in place.
    pub fn solve_upper(&self, b: &mut DVector<f64>) {
        for i in (0..self.n).rev() {
            let mut s = b[i];
            for k in i + 1..(i + self.bw + 1).min(self.n) {
                s -= self.l(k, i) * b[k];
            }
            b[i] = s / self.l(i, i);
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_lower(&mut x);
        self.solve_upper(&mut x);
        x
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        use rayon::prelude::*;
        let cols: Vec<DVector<f64>> = (0..b.ncols())
            .into_par_iter()
            .map(|j| self.solve(&b.column(j).into_owned()))
            .collect();
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for (j, c) in cols.iter().enumerate() {
            out.set_column(j, c);
        }
        out
    }
}
