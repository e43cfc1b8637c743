use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::spde::{make_spde_prior, SpdePrior, SpdePriorConfig, TensorField};
use super::Grid;
use crate::error::{Error, Result};
use crate::linalg::{SparseMatrix, SpdMatrix};
use crate::model::GaussianLinearModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AngularRange {
    /// Sources spread evenly over a 90° arc below the object.
    #[serde(rename = "limited_90deg")]
    Limited90deg,
    /// Sources spread evenly around the whole circle.
    #[serde(rename = "full_360deg")]
    Full360deg,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub density: f64,
}

/// Annulus of uniform density centered in the domain, with uniform disks
/// inside its hole.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub center: (f64, f64),
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub ring_density: f64,
    pub disks: Vec<Disk>,
}

impl Default for Phantom {
    fn default() -> Self {
        Phantom {
            center: (0.5, 0.5),
            inner_radius: 0.32,
            outer_radius: 0.40,
            ring_density: 0.006,
            disks: vec![
                Disk {
                    x: 0.42,
                    y: 0.55,
                    radius: 0.07,
                    density: 0.004,
                },
                Disk {
                    x: 0.60,
                    y: 0.58,
                    radius: 0.05,
                    density: 0.004,
                },
                Disk {
                    x: 0.52,
                    y: 0.38,
                    radius: 0.06,
                    density: 0.004,
                },
            ],
        }
    }
}

impl Phantom {
    pub fn density(&self, x: f64, y: f64) -> f64 {
        let r = ((x - self.center.0).powi(2) + (y - self.center.1).powi(2)).sqrt();
        let mut v = if r >= self.inner_radius && r <= self.outer_radius {
            self.ring_density
        } else {
            0.0
        };
        for d in &self.disks {
            if (x - d.x).powi(2) + (y - d.y).powi(2) <= d.radius * d.radius {
                v += d.density;
            }
        }
        v
    }

    /// Exact `∫ x(s) ds` along the half-line `ray`.
    pub fn line_integral(&self, ray: &Ray) -> f64 {
        let ring =
            chord(ray, self.center, self.outer_radius) - chord(ray, self.center, self.inner_radius);
        let disks: f64 = self
            .disks
            .iter()
            .map(|d| d.density * chord(ray, (d.x, d.y), d.radius))
            .sum();
        self.ring_density * ring + disks
    }
}

/// Length of the half-line inside a circle.
fn chord(ray: &Ray, c: (f64, f64), r: f64) -> f64 {
    let (px, py) = (c.0 - ray.origin.0, c.1 - ray.origin.1);
    let t0 = px * ray.direction.0 + py * ray.direction.1;
    let d2 = px * px + py * py - t0 * t0;
    if d2 >= r * r {
        return 0.0;
    }
    let s = (r * r - d2).sqrt();
    ((t0 + s).max(0.0) - (t0 - s).max(0.0)).max(0.0)
}

/// Half-line from `origin` along the unit vector `direction`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Ray {
    pub origin: (f64, f64),
    pub direction: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TomographySetup {
    /// Cells per side of `[0,1]²`.
    pub grid: usize,
    pub sources: usize,
    pub angular_range: AngularRange,
    pub rays_per_source: usize,
    /// Half-opening of each fan; the default covers the disk inscribed in
    /// the domain.
    pub fan_half_angle_deg: f64,
    pub source_radius: f64,
    pub noise_sigma: f64,
    pub kappa: f64,
    /// `γ` in the unit-cell convention of a `reference_grid`² grid, where
    /// the marginal variance is `1/(4π κ² γ² h_ref²)`. That variance is
    /// kept at every `grid`.
    pub gamma: f64,
    /// The domain is `reference_grid` length units across, so path
    /// lengths and data do not depend on `grid`.
    pub reference_grid: usize,
    /// Sub-samples per cell side when averaging the phantom into `x_true`.
    pub supersample: usize,
    pub phantom: Phantom,
    pub seed: u64,
}

impl Default for TomographySetup {
    fn default() -> Self {
        TomographySetup {
            grid: 32,
            sources: 10,
            angular_range: AngularRange::Limited90deg,
            rays_per_source: 100,
            fan_half_angle_deg: 30.0,
            source_radius: 1.0,
            noise_sigma: 0.002,
            kappa: 10.0,
            gamma: 800f64.sqrt(),
            reference_grid: 128,
            supersample: 8,
            phantom: Phantom::default(),
            seed: 0,
        }
    }
}

impl TomographySetup {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("tomography: {msg}")));
        if self.grid < 2 {
            return bad("grid needs at least 2 cells per side");
        }
        if self.sources == 0 || self.rays_per_source == 0 {
            return bad("need at least one source and one ray");
        }
        if !(self.fan_half_angle_deg > 0.0 && self.fan_half_angle_deg < 90.0) {
            return bad("fan half-angle must lie in (0°, 90°)");
        }
        if !(self.source_radius > std::f64::consts::FRAC_1_SQRT_2) {
            return bad("sources must lie outside the domain");
        }
        if !(self.noise_sigma > 0.0) {
            return bad("noise standard deviation must be positive");
        }
        if self.reference_grid == 0 {
            return bad("reference grid must be positive");
        }
        if self.supersample == 0 {
            return bad("supersample must be positive");
        }
        Ok(())
    }

    /// `γ` of the variance-preserving discretization on `[0,1]²`.
    pub fn continuum_gamma(&self) -> f64 {
        self.gamma / self.reference_grid as f64
    }

    /// All rays, source by source.
    pub fn rays(&self) -> Vec<Ray> {
        let deg = std::f64::consts::PI / 180.0;
        let c = (0.5, 0.5);
        let angles: Vec<f64> = match self.angular_range {
            AngularRange::Limited90deg => {
                let span = 90.0 * deg;
                (0..self.sources)
                    .map(|k| {
                        let f = if self.sources == 1 {
                            0.5
                        } else {
                            k as f64 / (self.sources - 1) as f64
                        };
                        270.0 * deg - 0.5 * span + f * span
                    })
                    .collect()
            }
            AngularRange::Full360deg => (0..self.sources)
                .map(|k| 270.0 * deg + k as f64 * 360.0 * deg / self.sources as f64)
                .collect(),
        };
        let half = self.fan_half_angle_deg * deg;
        let mut rays = Vec::with_capacity(self.sources * self.rays_per_source);
        for theta in angles {
            let origin = (
                c.0 + self.source_radius * theta.cos(),
                c.1 + self.source_radius * theta.sin(),
            );
            let central = theta + std::f64::consts::PI;
            for j in 0..self.rays_per_source {
                let f = if self.rays_per_source == 1 {
                    0.5
                } else {
                    j as f64 / (self.rays_per_source - 1) as f64
                };
                let phi = central - half + 2.0 * half * f;
                rays.push(Ray {
                    origin,
                    direction: (phi.cos(), phi.sin()),
                });
            }
        }
        rays
    }
}

/// Entry and exit parameters of a half-line through `[0,1]²`.
fn clip_unit_square(ray: &Ray) -> Option<(f64, f64)> {
    let mut lo = 0.0_f64;
    let mut hi = f64::INFINITY;
    for (p, d) in [
        (ray.origin.0, ray.direction.0),
        (ray.origin.1, ray.direction.1),
    ] {
        if d == 0.0 {
            if !(0.0..=1.0).contains(&p) {
                return None;
            }
        } else {
            let (a, b) = ((0.0 - p) / d, (1.0 - p) / d);
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
    }
    (hi > lo).then_some((lo, hi))
}

/// Exact intersection lengths of `ray` with the cells of the `size × size`
/// grid on `[0,1]²`, as `(cell, length)` pairs in traversal order.
pub fn siddon_row(ray: &Ray, size: usize) -> Vec<(usize, f64)> {
    let Some((t_in, t_out)) = clip_unit_square(ray) else {
        return Vec::new();
    };
    let nf = size as f64;
    let mut ts = vec![t_in, t_out];
    for (p, d) in [
        (ray.origin.0, ray.direction.0),
        (ray.origin.1, ray.direction.1),
    ] {
        if d != 0.0 {
            for k in 0..=size {
                let t = (k as f64 / nf - p) / d;
                if t > t_in && t < t_out {
                    ts.push(t);
                }
            }
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).expect("finite crossing"));
    let mut out = Vec::new();
    for w in ts.windows(2) {
        let len = w[1] - w[0];
        if len <= 1e-14 {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let x = ray.origin.0 + tm * ray.direction.0;
        let y = ray.origin.1 + tm * ray.direction.1;
        let i = ((x * nf).floor() as usize).min(size - 1);
        let j = ((y * nf).floor() as usize).min(size - 1);
        out.push((i + size * j, len));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TomographyProblem {
    pub setup: TomographySetup,
    pub model: GaussianLinearModel,
    pub forward: Arc<SparseMatrix>,
    pub prior: SpdePrior,
    pub rays: Vec<Ray>,
    /// Rays that miss the domain; their rows of `G` are zero.
    pub missed_rays: Vec<usize>,
    /// Cell averages of the phantom.
    pub x_true: DVector<f64>,
    /// Exact line integrals of the phantom, `−log(I_d/I_s)` before noise.
    pub exact_data: DVector<f64>,
    pub y: DVector<f64>,
}

pub fn make_tomography(setup: &TomographySetup) -> Result<TomographyProblem> {
    setup.validate()?;
    let size = setup.grid;
    let grid = Grid::cell_centers(size)?;
    let rays = setup.rays();
    let unit = setup.reference_grid as f64;
    let mut triplets = Vec::new();
    let mut missed_rays = Vec::new();
    for (i, ray) in rays.iter().enumerate() {
        let row = siddon_row(ray, size);
        if row.is_empty() {
            missed_rays.push(i);
        }
        triplets.extend(row.into_iter().map(|(j, len)| (i, j, unit * len)));
    }
    if !missed_rays.is_empty() {
        log::warn!(
            "{} of {} rays miss the domain; their rows are zero",
            missed_rays.len(),
            rays.len()
        );
    }
    let forward = Arc::new(SparseMatrix::from_triplets(
        rays.len(),
        grid.len(),
        &triplets,
    )?);
    let prior = make_spde_prior(&SpdePriorConfig {
        grid,
        kappa: setup.kappa,
        gamma: setup.continuum_gamma(),
        tensor: TensorField::Identity,
    })?;
    let gamma_obs = SpdMatrix::scaled_identity(rays.len(), setup.noise_sigma * setup.noise_sigma)?;
    let model = GaussianLinearModel::new(forward.clone(), gamma_obs, prior.covariance()?)?
        .with_label(format!(
            "tomography-{}-{}",
            size,
            match setup.angular_range {
                AngularRange::Limited90deg => "limited",
                AngularRange::Full360deg => "full",
            }
        ));

    let s = setup.supersample;
    let h = 1.0 / size as f64;
    let x_true = DVector::from_fn(grid.len(), |k, _| {
        let (ci, cj) = (k % size, k / size);
        let mut acc = 0.0;
        for a in 0..s {
            for b in 0..s {
                let x = (ci as f64 + (a as f64 + 0.5) / s as f64) * h;
                let y = (cj as f64 + (b as f64 + 0.5) / s as f64) * h;
                acc += setup.phantom.density(x, y);
            }
        }
        acc / (s * s) as f64
    });
    let source_intensity = 1.0;
    let exact_data = DVector::from_iterator(
        rays.len(),
        rays.iter().map(|r| {
            let detected = source_intensity * (-unit * setup.phantom.line_integral(r)).exp();
            -(detected / source_intensity).ln()
        }),
    );
    let y = &exact_data + model.noise(setup.seed);
    Ok(TomographyProblem {
        setup: setup.clone(),
        model,
        forward,
        prior,
        rays,
        missed_rays,
        x_true,
        exact_data,
        y,
    })
}
