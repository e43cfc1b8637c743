use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use super::{q1_stiffness, BandedCholesky, Grid};
use crate::error::{Error, Result};
use crate::linalg::{SparseMatrix, SpdMatrix, SquareRootFactor};
use crate::rng;

/// Tensor field `c(s)` of the anisotropic SPDE operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TensorField {
    Identity,
    Constant {
        c11: f64,
        c12: f64,
        c22: f64,
    },
    /// `R(θ(s)) diag(major, minor) R(θ(s))ᵀ` with `θ(s) = π · turns · (s₁ + s₂)`.
    Rotating {
        major: f64,
        minor: f64,
        turns: f64,
    },
}

impl TensorField {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            TensorField::Identity => true,
            TensorField::Constant { c11, c12, c22 } => c11 > 0.0 && c11 * c22 - c12 * c12 > 0.0,
            TensorField::Rotating {
                major,
                minor,
                turns,
            } => major > 0.0 && minor > 0.0 && turns.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "tensor field {self:?} is not positive definite"
            )))
        }
    }

    pub fn at(&self, x: f64, y: f64) -> Matrix2<f64> {
        match *self {
            TensorField::Identity => Matrix2::identity(),
            TensorField::Constant { c11, c12, c22 } => Matrix2::new(c11, c12, c12, c22),
            TensorField::Rotating {
                major,
                minor,
                turns,
            } => {
                let theta = std::f64::consts::PI * turns * (x + y);
                let (s, c) = theta.sin_cos();
                let r = Matrix2::new(c, -s, s, c);
                r * Matrix2::new(major, 0.0, 0.0, minor) * r.transpose()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpdePriorConfig {
    pub grid: Grid,
    pub kappa: f64,
    pub gamma: f64,
    pub tensor: TensorField,
}

/// Discretization of `γ(κ² − ∇·c∇) x = W`: with the bilinear stiffness
/// `K`, lumped mass `M` and `A = κ² M + K`, the square root of the
/// precision is `L = γ M^{-1/2} A` and the precision is `Lᵀ L`. Cell-area
/// scaling of the white noise keeps the marginal variance close to the
/// continuum value `1/(4π κ² γ²)` on any grid.
#[derive(Clone, Debug)]
pub struct SpdePrior {
    pub config: SpdePriorConfig,
    pub operator: SparseMatrix,
    pub sqrt_precision: SparseMatrix,
    pub precision: SparseMatrix,
    mass: DVector<f64>,
    factor: BandedCholesky,
}

pub fn make_spde_prior(cfg: &SpdePriorConfig) -> Result<SpdePrior> {
    if !(cfg.kappa > 0.0 && cfg.kappa.is_finite()) || !(cfg.gamma > 0.0 && cfg.gamma.is_finite()) {
        return Err(Error::Config(format!(
            "SPDE needs κ, γ > 0, got κ = {}, γ = {}",
            cfg.kappa, cfg.gamma
        )));
    }
    cfg.tensor.validate()?;
    let grid = cfg.grid;
    let k = q1_stiffness(&grid, |x, y| cfg.tensor.at(x, y))?;
    let mass = grid.lumped_mass();
    let k2 = cfg.kappa * cfg.kappa;
    let mut t = k.triplets();
    for i in 0..grid.len() {
        t.push((i, i, k2 * mass[i]));
    }
    let operator = SparseMatrix::from_triplets(grid.len(), grid.len(), &t)?;
    let sqrt_precision = SparseMatrix::from_triplets(
        grid.len(),
        grid.len(),
        &operator
            .triplets()
            .into_iter()
            .map(|(i, j, v)| (i, j, cfg.gamma * v / mass[i].sqrt()))
            .collect::<Vec<_>>(),
    )?;
    let mut pt = Vec::new();
    for (i, j, v) in operator.triplets() {
        for (l, w) in operator.row(j) {
            pt.push((i, l, cfg.gamma * cfg.gamma * v * w / mass[j]));
        }
    }
    let precision = SparseMatrix::from_triplets(grid.len(), grid.len(), &pt)?;
    let factor = BandedCholesky::factor(&operator)?;
    Ok(SpdePrior {
        config: cfg.clone(),
        operator,
        sqrt_precision,
        precision,
        mass,
        factor,
    })
}

impl SpdePrior {
    pub fn dim(&self) -> usize {
        self.mass.len()
    }

    /// `S = L⁻¹ = γ⁻¹ A⁻¹ M^{1/2}`, a square root of the covariance.
    pub fn covariance_sqrt(&self) -> Result<SquareRootFactor> {
        let n = self.dim();
        let rhs = DMatrix::from_diagonal(&self.mass.map(|m| m.sqrt() / self.config.gamma));
        let s = self.factor.solve_matrix(&rhs);
        debug_assert_eq!(s.nrows(), n);
        SquareRootFactor::general(s)
    }

    /// Dense covariance `L⁻¹ L⁻ᵀ`.
    pub fn covariance(&self) -> Result<SpdMatrix> {
        let s = self.covariance_sqrt()?;
        SpdMatrix::from_symmetrized(s.factor() * s.factor().transpose())
    }

    /// `Γpr b` through two solves with `A`.
    pub fn apply_covariance(&self, b: &DVector<f64>) -> DVector<f64> {
        let g2 = self.config.gamma * self.config.gamma;
        let z = self.factor.solve(b).component_mul(&self.mass) / g2;
        self.factor.solve(&z)
    }

    /// Draws `L⁻¹ z` for standard normal `z`.
    pub fn sample(&self, count: usize, seed: u64, stream: u64) -> DMatrix<f64> {
        let z = rng::normal_matrix(&mut rng::stream(seed, stream), self.dim(), count);
        let mut rhs = z;
        for (i, m) in self.mass.iter().enumerate() {
            rhs.row_mut(i).scale_mut(m.sqrt() / self.config.gamma);
        }
        self.factor.solve_matrix(&rhs)
    }
}

/// `γ` giving marginal standard deviation `sd` in the continuum limit.
pub(crate) fn gamma_for_sd(kappa: f64, sd: f64) -> f64 {
    1.0 / (kappa * sd * (4.0 * std::f64::consts::PI).sqrt())
}
