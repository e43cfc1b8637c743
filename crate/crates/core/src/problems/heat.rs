use std::sync::Arc;

use nalgebra::{DVector, Matrix2};
use serde::{Deserialize, Serialize};

use super::spde::{gamma_for_sd, make_spde_prior, SpdePrior, SpdePriorConfig, TensorField};
use super::{q1_stiffness, BandedCholesky, Grid};
use crate::error::{Error, Result};
use crate::linalg::{LinearOperator, SparseMatrix, SpdMatrix};
use crate::model::GaussianLinearModel;

/// `κ(s) = base · (1 + amplitude · sin(π s₁) sin(π s₂))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conductivity {
    pub base: f64,
    pub amplitude: f64,
}

impl Conductivity {
    pub fn at(&self, x: f64, y: f64) -> f64 {
        let pi = std::f64::consts::PI;
        self.base * (1.0 + self.amplitude * (pi * x).sin() * (pi * y).sin())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatProblemConfig {
    /// Nodes per side of `[0,1]²`.
    pub grid: usize,
    pub conductivity: Conductivity,
    /// Sensors per side of the square sensor array.
    pub sensors_per_side: usize,
    /// The sensors sit at `region · k/(sensors_per_side + 1)` in each
    /// coordinate, inside the lower-left square `[0, region]²`.
    pub sensor_region: f64,
    pub observation_times: usize,
    pub dt: f64,
    pub noise_sigma: f64,
    pub prior_kappa: f64,
    /// Prior marginal standard deviation; sets `γ`.
    pub prior_sd: f64,
    pub prior_tensor: TensorField,
    pub seed: u64,
}

impl Default for HeatProblemConfig {
    fn default() -> Self {
        HeatProblemConfig {
            grid: 20,
            conductivity: Conductivity {
                base: 1.0,
                amplitude: 0.5,
            },
            sensors_per_side: 3,
            sensor_region: 0.5,
            observation_times: 10,
            dt: 2e-4,
            noise_sigma: 1e-2,
            prior_kappa: 10.0,
            prior_sd: 1.0,
            prior_tensor: TensorField::Rotating {
                major: 1.0,
                minor: 0.1,
                turns: 1.0,
            },
            seed: 0,
        }
    }
}

impl HeatProblemConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("heat: {msg}")));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!(
                "time step must be positive and finite, got {}",
                self.dt
            ));
        }
        if self.observation_times == 0 || self.sensors_per_side == 0 {
            return bad("need at least one observation time and one sensor".into());
        }
        if !(self.sensor_region > 0.0 && self.sensor_region <= 1.0) {
            return bad(format!(
                "sensor region must lie in (0, 1], got {}",
                self.sensor_region
            ));
        }
        if !(self.conductivity.base >= 0.0) || !(self.conductivity.amplitude.abs() < 1.0) {
            return bad(format!(
                "conductivity {:?} is not non-negative",
                self.conductivity
            ));
        }
        if !(self.noise_sigma > 0.0) || !(self.prior_sd > 0.0) {
            return bad("noise and prior standard deviations must be positive".into());
        }
        Ok(())
    }
}

/// Initial condition to sensor readings: implicit Euler steps of
/// `M u' = −K u` (lumped bilinear mass, stiffness with conductivity
/// `κ(s)`, zero-flux boundary), read by bilinear interpolation at each
/// observation time. Output is `[d₁; …; d_T]`.
#[derive(Clone, Debug)]
pub struct HeatForward {
    grid: Grid,
    mass: DVector<f64>,
    step: BandedCholesky,
    sensors: Vec<Vec<(usize, f64)>>,
    times: usize,
    stiffness: SparseMatrix,
}

impl HeatForward {
    pub fn new(cfg: &HeatProblemConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = Grid::vertices(cfg.grid)?;
        let stiffness = q1_stiffness(&grid, |x, y| {
            Matrix2::identity() * cfg.conductivity.at(x, y)
        })?;
        let mass = grid.lumped_mass();
        let mut t: Vec<_> = stiffness
            .triplets()
            .into_iter()
            .map(|(i, j, v)| (i, j, cfg.dt * v))
            .collect();
        for i in 0..grid.len() {
            t.push((i, i, mass[i]));
        }
        let step =
            BandedCholesky::factor(&SparseMatrix::from_triplets(grid.len(), grid.len(), &t)?)?;
        let ns = cfg.sensors_per_side;
        let mut sensors = Vec::with_capacity(ns * ns);
        for b in 1..=ns {
            for a in 1..=ns {
                let x = cfg.sensor_region * a as f64 / (ns + 1) as f64;
                let y = cfg.sensor_region * b as f64 / (ns + 1) as f64;
                sensors.push(grid.interpolation(x, y));
            }
        }
        Ok(HeatForward {
            grid,
            mass,
            step,
            sensors,
            times: cfg.observation_times,
            stiffness,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn sensor_count(&self) -> usize {
        self.sensors.len()
    }

    pub fn stiffness(&self) -> &SparseMatrix {
        &self.stiffness
    }

    /// `(M + Δt K)⁻¹ M u`.
    pub fn step(&self, u: &DVector<f64>) -> DVector<f64> {
        self.step.solve(&u.component_mul(&self.mass))
    }

    /// States at `t₁, …, t_T`.
    pub fn states(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut u = x.clone();
        (0..self.times)
            .map(|_| {
                u = self.step(&u);
                u.clone()
            })
            .collect()
    }

    fn observe(&self, u: &DVector<f64>, out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(&self.sensors) {
            *o = s.iter().map(|&(k, w)| w * u[k]).sum();
        }
    }
}

impl LinearOperator for HeatForward {
    fn nrows(&self) -> usize {
        self.times * self.sensors.len()
    }

    fn ncols(&self) -> usize {
        self.grid.len()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let ns = self.sensors.len();
        let mut out = DVector::zeros(self.nrows());
        let mut u = x.clone();
        for t in 0..self.times {
            u = self.step(&u);
            self.observe(&u, &mut out.as_mut_slice()[t * ns..(t + 1) * ns]);
        }
        out
    }

    /// `Σ_t (M (M + Δt K)⁻¹)^t Cᵀ d_t`, accumulated backwards in time.
    fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        let ns = self.sensors.len();
        let mut z = DVector::zeros(self.grid.len());
        for t in (0..self.times).rev() {
            for (s, weights) in self.sensors.iter().enumerate() {
                for &(k, w) in weights {
                    z[k] += w * y[t * ns + s];
                }
            }
            z = self.step.solve(&z).component_mul(&self.mass);
        }
        z
    }
}

#[derive(Clone, Debug)]
pub struct HeatProblem {
    pub config: HeatProblemConfig,
    pub model: GaussianLinearModel,
    pub forward: Arc<HeatForward>,
    pub prior: SpdePrior,
    /// A prior draw.
    pub x_true: DVector<f64>,
    pub y: DVector<f64>,
}

const TRUTH_STREAM: u64 = 0x4854;

pub fn make_heat(cfg: &HeatProblemConfig) -> Result<HeatProblem> {
    let forward = Arc::new(HeatForward::new(cfg)?);
    let prior = make_spde_prior(&SpdePriorConfig {
        grid: *forward.grid(),
        kappa: cfg.prior_kappa,
        gamma: gamma_for_sd(cfg.prior_kappa, cfg.prior_sd),
        tensor: cfg.prior_tensor.clone(),
    })?;
    let m = forward.nrows();
    let gamma_obs = SpdMatrix::scaled_identity(m, cfg.noise_sigma * cfg.noise_sigma)?;
    let model = GaussianLinearModel::new(forward.clone(), gamma_obs, prior.covariance()?)?
        .with_label(format!("heat-{}", cfg.grid));
    let x_true = prior
        .sample(1, cfg.seed, TRUTH_STREAM)
        .column(0)
        .into_owned();
    let y = model.simulate_data(&x_true, cfg.seed)?;
    Ok(HeatProblem {
        config: cfg.clone(),
        model,
        forward,
        prior,
        x_true,
        y,
    })
}
