//! Bayes-risk optimal linear approximations of the posterior mean
//! `μpos(y) = Γpos Gᵀ Γobs⁻¹ y`, their closed-form risks, a Monte Carlo
//! check of those risks, and prior-conditioned CGLS.
//!
//! The risk of an estimator `A y` is `E ‖A y − x‖²_{Γpos⁻¹}` over the
//! joint distribution of `(x, y)`. The low-rank map
//! `A* = Σ_{i≤r} δᵢ/(1+δᵢ²) ŵᵢ v̂ᵢᵀ` attains `Σ_{i>r} δᵢ² + ℓ`; the
//! low-rank update `Â* = Γ̂pos Gᵀ Γobs⁻¹` attains `Σ_{i>r} δᵢ⁶ + ℓ`.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covapprox::{CovarianceApproximation, PencilDecomposition, Provenance};
use crate::error::{Error, Result};
use crate::linalg::{GsvdTriplets, LinearOperator, SpdMatrix};
use crate::model::{ExactPosterior, GaussianLinearModel};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanKind {
    LowRank,
    LowRankUpdate,
    Cgls,
}

impl MeanKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MeanKind::LowRank => "low_rank",
            MeanKind::LowRankUpdate => "low_rank_update",
            MeanKind::Cgls => "cgls",
        }
    }
}

impl std::fmt::Display for MeanKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MeanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_rank" => Ok(MeanKind::LowRank),
            "low_rank_update" => Ok(MeanKind::LowRankUpdate),
            "cgls" => Ok(MeanKind::Cgls),
            other => Err(Error::Config(format!(
                "unknown mean approximation {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
enum Repr {
    /// `Ŵ diag(c) V̂ᵀ`.
    LowRank {
        w_hat: DMatrix<f64>,
        v_hat: DMatrix<f64>,
        weights: DVector<f64>,
    },
    LowRankUpdate {
        cov: CovarianceApproximation,
        model: GaussianLinearModel,
    },
    Cgls {
        model: GaussianLinearModel,
    },
}

/// A reusable map `y ↦ μ̂(y)`.
#[derive(Clone, Debug)]
pub struct MeanApproximator {
    kind: MeanKind,
    order: usize,
    n: usize,
    m: usize,
    /// `(μpr, G μpr)` for a nonzero prior mean.
    shift: Option<(DVector<f64>, DVector<f64>)>,
    repr: Repr,
}

fn prior_shift(model: &GaussianLinearModel) -> Option<(DVector<f64>, DVector<f64>)> {
    let mu = model.prior_mean();
    if mu.iter().all(|v| *v == 0.0) {
        None
    } else {
        Some((mu.clone(), model.forward().apply(mu)))
    }
}

/// `A* = Σ_{i≤r} δᵢ/(1+δᵢ²) ŵᵢ v̂ᵢᵀ` from the whitened SVD triplets.
pub fn build_low_rank(
    model: &GaussianLinearModel,
    triplets: &GsvdTriplets,
    r: usize,
) -> Result<MeanApproximator> {
    if r > triplets.len() {
        return Err(Error::Rank {
            requested: r,
            available: triplets.len(),
        });
    }
    let weights =
        DVector::from_iterator(r, triplets.delta.iter().take(r).map(|d| d / (1.0 + d * d)));
    Ok(MeanApproximator {
        kind: MeanKind::LowRank,
        order: r,
        n: model.n(),
        m: model.m(),
        shift: prior_shift(model),
        repr: Repr::LowRank {
            w_hat: triplets.w_hat.columns(0, r).into_owned(),
            v_hat: triplets.v_hat.columns(0, r).into_owned(),
            weights,
        },
    })
}

/// The same map from the pencil, using `δᵢ v̂ᵢ = Γobs⁻¹ G ŵᵢ`:
/// `A* = Σ_{i≤r} (1+δᵢ²)⁻¹ ŵᵢ (Γobs⁻¹ G ŵᵢ)ᵀ`.
pub fn build_low_rank_from_pencil(
    model: &GaussianLinearModel,
    pencil: &PencilDecomposition,
    r: usize,
) -> Result<MeanApproximator> {
    if r > pencil.len() {
        return Err(Error::Rank {
            requested: r,
            available: pencil.len(),
        });
    }
    let w_hat = pencil.w_hat.columns(0, r).into_owned();
    let v_hat = model
        .gamma_obs()
        .solve_matrix(&model.forward().apply_matrix(&w_hat));
    let weights =
        DVector::from_iterator(r, pencil.delta_sq.iter().take(r).map(|d2| 1.0 / (1.0 + d2)));
    Ok(MeanApproximator {
        kind: MeanKind::LowRank,
        order: r,
        n: model.n(),
        m: model.m(),
        shift: prior_shift(model),
        repr: Repr::LowRank {
            w_hat,
            v_hat,
            weights,
        },
    })
}

/// `Â* = Γ̂pos Gᵀ Γobs⁻¹` for the optimal `Γ̂pos` of `model`.
pub fn build_low_rank_update(
    model: &GaussianLinearModel,
    cov: &CovarianceApproximation,
) -> Result<MeanApproximator> {
    if cov.provenance() != Provenance::Optimal {
        return Err(Error::Provenance {
            expected: Provenance::Optimal.to_string(),
            found: cov.provenance().to_string(),
        });
    }
    if cov.model_ref() != model.fingerprint() {
        return Err(Error::Provenance {
            expected: model.fingerprint(),
            found: cov.model_ref().to_string(),
        });
    }
    Ok(MeanApproximator {
        kind: MeanKind::LowRankUpdate,
        order: cov.rank(),
        n: model.n(),
        m: model.m(),
        shift: prior_shift(model),
        repr: Repr::LowRankUpdate {
            cov: cov.clone(),
            model: model.clone(),
        },
    })
}

/// `iterations` steps of prior-conditioned CGLS per application.
pub fn build_cgls(model: &GaussianLinearModel, iterations: usize) -> MeanApproximator {
    MeanApproximator {
        kind: MeanKind::Cgls,
        order: iterations,
        n: model.n(),
        m: model.m(),
        shift: None,
        repr: Repr::Cgls {
            model: model.clone(),
        },
    }
}

impl MeanApproximator {
    pub fn kind(&self) -> MeanKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn apply(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.m {
            return Err(Error::shape(format!(
                "data has length {}, expected {}",
                y.len(),
                self.m
            )));
        }
        let centered;
        let y = match &self.shift {
            Some((_, gmu)) => {
                centered = y - gmu;
                &centered
            }
            None => y,
        };
        let mut x = match &self.repr {
            Repr::LowRank {
                w_hat,
                v_hat,
                weights,
            } => w_hat * v_hat.tr_mul(y).component_mul(weights),
            Repr::LowRankUpdate { cov, model } => {
                cov.apply(&model.forward().apply_transpose(&model.gamma_obs().solve(y)))
            }
            Repr::Cgls { model } => cgls_priorconditioned(model, y, self.order)?.x,
        };
        if let Some((mu, _)) = &self.shift {
            x += mu;
        }
        Ok(x)
    }

    /// Column-wise application.
    pub fn apply_matrix(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.m {
            return Err(Error::shape(format!(
                "data has {} rows, expected {}",
                y.nrows(),
                self.m
            )));
        }
        match (&self.repr, &self.shift) {
            (
                Repr::LowRank {
                    w_hat,
                    v_hat,
                    weights,
                },
                None,
            ) => {
                let mut c = v_hat.tr_mul(y);
                for (i, w) in weights.iter().enumerate() {
                    c.row_mut(i).scale_mut(*w);
                }
                Ok(w_hat * c)
            }
            (Repr::LowRankUpdate { cov, model }, None) => {
                let z = model.gamma_obs().solve_matrix(y);
                Ok(cov.apply_matrix(&model.forward().apply_transpose_matrix(&z)))
            }
            _ => {
                let cols: Result<Vec<DVector<f64>>> = (0..y.ncols())
                    .into_par_iter()
                    .map(|j| self.apply(&y.column(j).into_owned()))
                    .collect();
                let cols = cols?;
                let mut out = DMatrix::zeros(self.n, cols.len());
                for (j, c) in cols.iter().enumerate() {
                    out.set_column(j, c);
                }
                Ok(out)
            }
        }
    }

    /// Dense n×m matrix of the (affine part of the) map; `None` for CGLS,
    /// which is not linear in `y`.
    pub fn dense_map(&self) -> Option<DMatrix<f64>> {
        match &self.repr {
            Repr::Cgls { .. } => None,
            Repr::LowRank { .. } | Repr::LowRankUpdate { .. } => {
                let plain = MeanApproximator {
                    shift: None,
                    ..self.clone()
                };
                plain.apply_matrix(&DMatrix::identity(self.m, self.m)).ok()
            }
        }
    }
}

/// Closed-form minimum Bayes risk at order `r`, given every generalized
/// eigenvalue `δᵢ²` (non-increasing) and the parameter dimension `ℓ`.
/// `None` for CGLS.
pub fn theoretical_risk(kind: MeanKind, delta_sq: &[f64], r: usize, ell: usize) -> Option<f64> {
    let tail = delta_sq.iter().skip(r).map(|d| d.max(0.0));
    let sum: f64 = match kind {
        MeanKind::LowRank => tail.sum(),
        MeanKind::LowRankUpdate => tail.map(|d| d * d * d).sum(),
        MeanKind::Cgls => return None,
    };
    Some(sum + ell as f64)
}

/// `Σ_{i>r} δᵢ²(1+δᵢ²)(1−δᵢ²)`, the low-rank risk minus the low-rank
/// update risk. Negative exactly when some `δᵢ² > 1` remains past `r`
/// (in the sense of the dominant terms).
pub fn risk_difference(delta_sq: &[f64], r: usize) -> f64 {
    delta_sq
        .iter()
        .skip(r)
        .map(|d| d.max(0.0))
        .map(|d| d * (1.0 + d) * (1.0 - d))
        .sum()
}

/// First order `r` at which every remaining `δᵢ²` is below one.
pub fn crossover_order(delta_sq: &[f64]) -> usize {
    (0..=delta_sq.len())
        .find(|&r| delta_sq.iter().skip(r).all(|d| *d < 1.0))
        .unwrap_or(delta_sq.len())
}

#[derive(Clone, Debug, Serialize)]
pub struct RiskReport {
    pub kind: MeanKind,
    pub order: usize,
    pub risk_theory: Option<f64>,
    pub risk_mc: f64,
    pub mc_stderr: f64,
    pub sample_count: usize,
    pub seed: u64,
    /// Mean of `‖A y − μpos(y)‖²_{Γpos⁻¹}`.
    pub approximation_term: f64,
    /// Mean of `‖μpos(y) − x‖²_{Γpos⁻¹}`, whose expectation is `ℓ`.
    pub posterior_term: f64,
    /// Per-sample `‖A y − μpos(y)‖²_{Γpos⁻¹}`.
    #[serde(skip)]
    pub err_y: Vec<f64>,
}

const MC_CHUNK: usize = 2000;

/// Chunk `c` of the joint draws `(x, y)` behind [`monte_carlo_risk`].
fn joint_chunk(
    model: &GaussianLinearModel,
    samples: usize,
    seed: u64,
    c: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let count = MC_CHUNK.min(samples - c * MC_CHUNK);
    let mut r = rng::stream(seed, c as u64);
    let mut x = model.gamma_pr().cholesky_factor() * rng::normal_matrix(&mut r, model.n(), count);
    for mut col in x.column_iter_mut() {
        col += model.prior_mean();
    }
    let y = model.forward().apply_matrix(&x)
        + model.gamma_obs().cholesky_factor() * rng::normal_matrix(&mut r, model.m(), count);
    (x, y)
}

/// Monte Carlo Bayes risk of CGLS at every order in `orders` (strictly
/// increasing) from one run per sample. Uses the same draws as
/// [`monte_carlo_risk`] with the same `seed`.
pub fn monte_carlo_cgls_risks(
    model: &GaussianLinearModel,
    posterior: &ExactPosterior,
    orders: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let chunks = samples.div_ceil(MC_CHUNK);
    let prec = posterior.precision.matrix();
    let parts: Result<Vec<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let (x, y) = joint_chunk(model, samples, seed, c);
            let cols: Result<Vec<Vec<f64>>> = (0..y.ncols())
                .into_par_iter()
                .map(|j| {
                    let its = cgls_iterates(model, &y.column(j).into_owned(), orders)?;
                    let xj = x.column(j);
                    Ok(its
                        .iter()
                        .map(|est| {
                            let e = est - xj;
                            e.dot(&(prec * &e))
                        })
                        .collect())
                })
                .collect();
            let mut sums = vec![0.0; orders.len()];
            for col in cols? {
                for (s, v) in sums.iter_mut().zip(col) {
                    *s += v;
                }
            }
            Ok(sums)
        })
        .collect();
    let mut total = vec![0.0; orders.len()];
    for part in parts? {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    Ok(total.into_iter().map(|t| t / samples as f64).collect())
}

/// Monte Carlo estimate of `E ‖A y − x‖²_{Γpos⁻¹}` over `(x, y)` drawn from
/// the joint distribution. Samples are generated in fixed chunks with one
/// random stream per chunk, so the estimate does not depend on the thread
/// count, and reusing `seed` across approximators gives common random
/// numbers.
pub fn monte_carlo_risk(
    approx: &MeanApproximator,
    model: &GaussianLinearModel,
    posterior: &ExactPosterior,
    samples: usize,
    seed: u64,
    theory: Option<f64>,
) -> Result<RiskReport> {
    let chunks = samples.div_ceil(MC_CHUNK);
    let prec = posterior.precision.matrix();
    let parts: Result<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let (x, y) = joint_chunk(model, samples, seed, c);
            let est = approx.apply_matrix(&y)?;
            let mut mu = &posterior.mean_map * &y;
            if model.prior_mean().iter().any(|v| *v != 0.0) {
                let shift = model.prior_mean()
                    - &posterior.mean_map * model.forward().apply(model.prior_mean());
                for mut col in mu.column_iter_mut() {
                    col += &shift;
                }
            }
            let e_total = &est - &x;
            let e_approx = &est - &mu;
            let e_post = &mu - &x;
            let q = |e: &DMatrix<f64>| -> Vec<f64> {
                let pe = prec * e;
                (0..e.ncols())
                    .map(|j| e.column(j).dot(&pe.column(j)))
                    .collect()
            };
            Ok((q(&e_total), q(&e_approx), q(&e_post)))
        })
        .collect();
    let parts = parts?;
    let mut total = Vec::with_capacity(samples);
    let mut err_y = Vec::with_capacity(samples);
    let mut post = Vec::with_capacity(samples);
    for (t, a, p) in parts {
        total.extend(t);
        err_y.extend(a);
        post.extend(p);
    }
    let nf = samples as f64;
    let mean = total.iter().sum::<f64>() / nf;
    let var = total.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0).max(1.0);
    Ok(RiskReport {
        kind: approx.kind(),
        order: approx.order(),
        risk_theory: theory,
        risk_mc: mean,
        mc_stderr: (var / nf).sqrt(),
        sample_count: samples,
        seed,
        approximation_term: err_y.iter().sum::<f64>() / nf,
        posterior_term: post.iter().sum::<f64>() / nf,
        err_y,
    })
}

/// CSV rows `kind,r,risk_theory,risk_mc,mc_stderr,N,seed`.
pub fn write_risk_csv<W: Write>(w: W, reports: &[RiskReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "kind",
        "r",
        "risk_theory",
        "risk_mc",
        "mc_stderr",
        "N",
        "seed",
    ])
    .map_err(csv_err)?;
    for r in reports {
        out.write_record([
            r.kind.to_string(),
            r.order.to_string(),
            r.risk_theory.map_or(String::new(), |v| format!("{v:e}")),
            format!("{:e}", r.risk_mc),
            format!("{:e}", r.mc_stderr),
            r.sample_count.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("{other:?}")),
    }
}

#[derive(Clone, Debug)]
pub struct CglsResult {
    pub x: DVector<f64>,
    /// `‖S_obs⁻¹(y − G x^k)‖` for `k = 0..=iterations`.
    pub residual_norms: Vec<f64>,
    pub iterations: usize,
    /// True when the recurrence stopped early (exact solution or
    /// vanishing search direction).
    pub breakdown: bool,
}

/// CGLS on `S_obs⁻¹ G S_pr q = S_obs⁻¹ y` from `q = 0`, returning
/// `x = μpr + S_pr q` after at most `iterations` steps. `y` is taken
/// relative to `G μpr`.
pub fn cgls_priorconditioned(
    model: &GaussianLinearModel,
    y: &DVector<f64>,
    iterations: usize,
) -> Result<CglsResult> {
    let mut q = DVector::zeros(model.n());
    let (residual_norms, breakdown) = cgls_run(model, y, iterations, |_, qk| q.copy_from(qk))?;
    Ok(CglsResult {
        x: model.prior_mean() + model.gamma_pr().cholesky_factor() * q,
        iterations: residual_norms.len() - 1,
        residual_norms,
        breakdown,
    })
}

/// CGLS iterates `x^r` for every `r` in `orders` (strictly increasing)
/// from a single run. After a breakdown the last iterate is repeated.
pub fn cgls_iterates(
    model: &GaussianLinearModel,
    y: &DVector<f64>,
    orders: &[usize],
) -> Result<Vec<DVector<f64>>> {
    if orders.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "CGLS orders must be strictly increasing, got {orders:?}"
        )));
    }
    let s_pr = model.gamma_pr().cholesky_factor();
    let to_x = |q: &DVector<f64>| model.prior_mean() + s_pr * q;
    let mut out = Vec::with_capacity(orders.len());
    let mut last = DVector::zeros(model.n());
    let top = orders.last().copied().unwrap_or(0);
    cgls_run(model, y, top, |k, q| {
        if out.len() < orders.len() && orders[out.len()] == k {
            out.push(to_x(q));
        }
        last.copy_from(q);
    })?;
    let tail = to_x(&last);
    out.resize(orders.len(), tail);
    Ok(out)
}

/// Runs the recurrence, calling `record(k, q_k)` for `k = 0` and after
/// every step. Returns the residual norms and the breakdown flag.
fn cgls_run(
    model: &GaussianLinearModel,
    y: &DVector<f64>,
    iterations: usize,
    mut record: impl FnMut(usize, &DVector<f64>),
) -> Result<(Vec<f64>, bool)> {
    if y.len() != model.m() {
        return Err(Error::shape(format!(
            "data has length {}, expected {}",
            y.len(),
            model.m()
        )));
    }
    let s_pr = model.gamma_pr().cholesky_factor();
    let l_obs = model.gamma_obs().cholesky_factor();
    let g = model.forward();
    let solve = |v: DVector<f64>| {
        l_obs
            .solve_lower_triangular(&v)
            .expect("nonsingular factor")
    };
    let solve_t = |v: DVector<f64>| {
        l_obs
            .tr_solve_lower_triangular(&v)
            .expect("nonsingular factor")
    };
    let op = |q: &DVector<f64>| solve(g.apply(&(s_pr * q)));
    let op_t = |r: &DVector<f64>| s_pr.tr_mul(&g.apply_transpose(&solve_t(r.clone())));

    let mut q = DVector::zeros(model.n());
    let mut r = solve(y.clone());
    let mut s = op_t(&r);
    let mut p = s.clone();
    let mut gamma = s.norm_squared();
    let mut residuals = vec![r.norm()];
    let mut breakdown = false;
    let gamma0 = gamma;
    record(0, &q);
    for k in 1..=iterations {
        if gamma <= 1e-30 * gamma0.max(f64::MIN_POSITIVE) || gamma == 0.0 {
            breakdown = true;
            break;
        }
        let t = op(&p);
        let tt = t.norm_squared();
        if tt == 0.0 {
            breakdown = true;
            break;
        }
        let alpha = gamma / tt;
        q.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &t, 1.0);
        s = op_t(&r);
        let gamma_new = s.norm_squared();
        p = &s + &p * (gamma_new / gamma);
        gamma = gamma_new;
        residuals.push(r.norm());
        record(k, &q);
    }
    Ok((residuals, breakdown))
}

/// `‖v‖_A = (vᵀ A v)^{1/2}`.
pub fn weighted_norm(a: &SpdMatrix, v: &DVector<f64>) -> f64 {
    v.dot(&a.apply(v)).max(0.0).sqrt()
}

/// Median over `reps` timed batches of the cost of one application of
/// `approx`, divided by that of one application of the posterior precision
/// `H + Γpr⁻¹`. Runs on a single thread.
pub fn relative_cpu_time(
    approx: &MeanApproximator,
    model: &GaussianLinearModel,
    reps: usize,
) -> Result<f64> {
    let reps = reps.max(20);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut r = rng::stream(0x7177, 0);
        let y = rng::normal_vector(&mut r, model.m());
        let x = rng::normal_vector(&mut r, model.n());
        let h = model.hessian();
        let num = median_time(reps, || approx.apply(&y).map(|v| v[0]))?;
        let den = median_time(reps, || Ok((h.apply(&x) + model.gamma_pr().solve(&x))[0]))?;
        Ok(num / den)
    })
}

/// Median seconds per call; each timed batch runs long enough to be
/// measurable.
fn median_time(reps: usize, mut f: impl FnMut() -> Result<f64>) -> Result<f64> {
    let mut batch = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..batch {
            std::hint::black_box(f()?);
        }
        if t.elapsed().as_secs_f64() > 2e-4 || batch >= 1 << 20 {
            break;
        }
        batch *= 2;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        for _ in 0..batch {
            std::hint::black_box(f()?);
        }
        times.push(t.elapsed().as_secs_f64() / batch as f64);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(times[times.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covapprox::optimal_covariance_update;
    use crate::linalg::{gsvd_triplets, EigOptions};

    fn random_spd(n: usize, seed: u64) -> SpdMatrix {
        let a = rng::normal_matrix(&mut rng::stream(seed, 1), n, n);
        SpdMatrix::from_symmetrized(&a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.2)
            .unwrap()
    }

    fn random_model(m: usize, n: usize, seed: u64) -> GaussianLinearModel {
        let g = rng::normal_matrix(&mut rng::stream(seed, 0), m, n);
        GaussianLinearModel::dense(g, random_spd(m, seed + 1), random_spd(n, seed + 2)).unwrap()
    }

    fn setup(model: &GaussianLinearModel) -> (PencilDecomposition, GsvdTriplets) {
        let p = PencilDecomposition::compute(model, model.n(), &EigOptions::default()).unwrap();
        let t = gsvd_triplets(
            model.forward().as_ref(),
            &model.prior_sqrt(),
            &model.obs_sqrt(),
            model.n(),
        )
        .unwrap();
        (p, t)
    }

    #[test]
    fn scalar_case() {
        let one = SpdMatrix::identity(1);
        let model = GaussianLinearModel::dense(DMatrix::identity(1, 1), one.clone(), one).unwrap();
        let (p, t) = setup(&model);
        let y = DVector::from_vec(vec![3.0]);
        let a0 = build_low_rank(&model, &t, 0).unwrap();
        assert_eq!(a0.apply(&y).unwrap()[0], 0.0);
        let a = build_low_rank(&model, &t, 1).unwrap();
        assert!((a.apply(&y).unwrap()[0] - 1.5).abs() < 1e-15);
        let cov = optimal_covariance_update(&model, &p, 1).unwrap();
        let u = build_low_rank_update(&model, &cov).unwrap();
        assert!((u.apply(&y).unwrap()[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn zero_order_update_uses_the_prior() {
        let model = random_model(4, 5, 3);
        let (p, _) = setup(&model);
        let cov = optimal_covariance_update(&model, &p, 0).unwrap();
        let u = build_low_rank_update(&model, &cov).unwrap();
        let gd = model.forward().to_dense();
        let expected = model.gamma_pr().matrix() * gd.transpose() * model.gamma_obs().inverse();
        assert!((u.dense_map().unwrap() - expected).norm() < 1e-10);
    }

    #[test]
    fn full_order_is_exact_and_projected_equivalence() {
        let model = random_model(8, 8, 5);
        let (p, t) = setup(&model);
        let post = model.exact_posterior().unwrap();
        let scale = post.mean_map.norm();
        let a = build_low_rank(&model, &t, 8).unwrap();
        assert!((a.dense_map().unwrap() - &post.mean_map).norm() < 1e-8 * scale);
        let cov = optimal_covariance_update(&model, &p, 8).unwrap();
        let u = build_low_rank_update(&model, &cov).unwrap();
        assert!((u.dense_map().unwrap() - &post.mean_map).norm() < 1e-8 * scale);

        for r in 0..=8 {
            let proj = crate::covapprox::optimal_projector(&p, r).unwrap();
            let pm = proj
                .projected_model(&model)
                .unwrap()
                .exact_posterior()
                .unwrap()
                .mean_map;
            let a = build_low_rank(&model, &t, r).unwrap().dense_map().unwrap();
            assert!((&a - &pm).norm() < 1e-8 * scale, "r = {r}");
            let b = build_low_rank_from_pencil(&model, &p, r)
                .unwrap()
                .dense_map()
                .unwrap();
            assert!((&a - &b).norm() < 1e-8 * scale, "r = {r}");
        }
    }

    #[test]
    fn truncated_tikhonov_form() {
        // A* = S_pr W_r diag(δ/(1+δ²)) V_rᵀ S_obs⁻¹
        let model = random_model(6, 5, 9);
        let (_, t) = setup(&model);
        let r = 3;
        let a = build_low_rank(&model, &t, r).unwrap().dense_map().unwrap();
        let mut d = DMatrix::zeros(r, r);
        for i in 0..r {
            d[(i, i)] = t.delta[i] / (1.0 + t.delta[i].powi(2));
        }
        let l_obs = model.gamma_obs().cholesky_factor();
        let inv_obs = l_obs.clone().try_inverse().unwrap();
        let expected = model.gamma_pr().cholesky_factor()
            * t.right.columns(0, r)
            * d
            * t.left.columns(0, r).transpose()
            * inv_obs;
        assert!((a - expected).norm() < 1e-8);
    }

    #[test]
    fn linearity_and_zero_data() {
        let model = random_model(5, 6, 11);
        let (p, t) = setup(&model);
        let a = build_low_rank(&model, &t, 3).unwrap();
        let u = build_low_rank_update(&model, &optimal_covariance_update(&model, &p, 3).unwrap())
            .unwrap();
        let mut r = rng::stream(12, 0);
        let y1 = rng::normal_vector(&mut r, 5);
        let y2 = rng::normal_vector(&mut r, 5);
        for m in [&a, &u] {
            let lhs = m.apply(&(&y1 * 2.5 + &y2)).unwrap();
            let rhs = m.apply(&y1).unwrap() * 2.5 + m.apply(&y2).unwrap();
            assert!((lhs - rhs).norm() < 1e-10 * (1.0 + y1.norm()));
            assert_eq!(m.apply(&DVector::zeros(5)).unwrap(), DVector::zeros(6));
        }
        assert!(matches!(a.apply(&DVector::zeros(4)), Err(Error::Shape(_))));
        // realized map has rank at most r
        let rank = a
            .dense_map()
            .unwrap()
            .svd(false, false)
            .singular_values
            .iter()
            .filter(|s| **s > 1e-10)
            .count();
        assert!(rank <= 3);
    }

    #[test]
    fn provenance_is_checked() {
        let model = random_model(4, 4, 13);
        let hess = crate::covapprox::hessian_based_update(&model, 2, 100).unwrap();
        assert!(matches!(
            build_low_rank_update(&model, &hess),
            Err(Error::Provenance { .. })
        ));
        let other = random_model(4, 4, 14);
        let (p, _) = setup(&other);
        let cov = optimal_covariance_update(&other, &p, 2).unwrap();
        assert!(matches!(
            build_low_rank_update(&model, &cov),
            Err(Error::Provenance { .. })
        ));
    }

    #[test]
    fn risk_formulas() {
        let d2 = [4.0, 1.0, 0.25];
        assert_eq!(theoretical_risk(MeanKind::LowRank, &d2, 1, 3), Some(4.25));
        assert_eq!(
            theoretical_risk(MeanKind::LowRankUpdate, &d2, 1, 3),
            Some(4.015625)
        );
        assert_eq!(theoretical_risk(MeanKind::LowRank, &d2, 3, 3), Some(3.0));
        assert_eq!(
            theoretical_risk(MeanKind::LowRankUpdate, &[2.0, 0.0], 1, 2),
            Some(2.0)
        );
        assert_eq!(theoretical_risk(MeanKind::Cgls, &d2, 1, 3), None);
        for r in 0..=3 {
            let a = theoretical_risk(MeanKind::LowRank, &d2, r, 3).unwrap();
            let b = theoretical_risk(MeanKind::LowRankUpdate, &d2, r, 3).unwrap();
            assert!((a - b - risk_difference(&d2, r)).abs() < 1e-12);
        }
        assert_eq!(crossover_order(&d2), 2);
        assert_eq!(crossover_order(&[0.5]), 0);
    }

    #[test]
    fn monte_carlo_matches_theory() {
        let model = random_model(4, 4, 17);
        let (p, t) = setup(&model);
        let post = model.exact_posterior().unwrap();
        let d2: Vec<f64> = p.delta_sq.iter().copied().collect();
        let exact = build_low_rank(&model, &t, 4).unwrap();
        let rep = monte_carlo_risk(&exact, &model, &post, 20_000, 3, Some(4.0)).unwrap();
        assert!(
            (rep.risk_mc - 4.0).abs() < 3.0 * rep.mc_stderr + 1e-12,
            "{rep:?}"
        );
        for r in [1, 2] {
            let a = build_low_rank(&model, &t, r).unwrap();
            let th = theoretical_risk(MeanKind::LowRank, &d2, r, 4).unwrap();
            let rep = monte_carlo_risk(&a, &model, &post, 20_000, 4, Some(th)).unwrap();
            assert!(
                (rep.risk_mc - th).abs() < 4.0 * rep.mc_stderr,
                "{r}: {} vs {th}",
                rep.risk_mc
            );
        }
        // thread count does not change the estimate
        let a = build_low_rank(&model, &t, 2).unwrap();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let r1 = one.install(|| monte_carlo_risk(&a, &model, &post, 5000, 8, None).unwrap());
        let r2 = monte_carlo_risk(&a, &model, &post, 5000, 8, None).unwrap();
        assert_eq!(r1.risk_mc, r2.risk_mc);

        let mut buf = Vec::new();
        write_risk_csv(&mut buf, &[r1]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("kind,r,risk_theory,risk_mc,mc_stderr,N,seed\nlow_rank,2,,"));
    }

    #[test]
    fn cgls_behaviour() {
        let model = random_model(6, 8, 19);
        let zero = cgls_priorconditioned(&model, &DVector::zeros(6), 5).unwrap();
        assert_eq!(zero.x, DVector::zeros(8));
        let y = rng::normal_vector(&mut rng::stream(20, 0), 6);
        let res = cgls_priorconditioned(&model, &y, 6).unwrap();
        assert!(res
            .residual_norms
            .windows(2)
            .all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        // full Krylov dimension: minimum-norm least-squares solution
        let s_pr = model.gamma_pr().cholesky_factor().clone();
        let l_obs = model.gamma_obs().cholesky_factor().clone();
        let a = l_obs
            .solve_lower_triangular(&(model.forward().to_dense() * &s_pr))
            .unwrap();
        let b = l_obs.solve_lower_triangular(&y).unwrap();
        let pinv = a.clone().pseudo_inverse(1e-12).unwrap();
        let expected = &s_pr * (pinv * b);
        assert!((&res.x - &expected).norm() < 1e-6 * expected.norm());
        let cg = build_cgls(&model, 6);
        assert!((cg.apply(&y).unwrap() - &res.x).norm() < 1e-12);
    }

    #[test]
    fn nonzero_prior_mean() {
        let base = random_model(5, 4, 23);
        let mu = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
        let model = base.with_prior_mean(mu).unwrap();
        let (p, t) = setup(&model);
        let post = model.exact_posterior().unwrap();
        let y = rng::normal_vector(&mut rng::stream(24, 0), 5);
        let exact = post.mean(&model, &y);
        let a = build_low_rank(&model, &t, 4).unwrap();
        assert!((a.apply(&y).unwrap() - &exact).norm() < 1e-8 * exact.norm());
        let u = build_low_rank_update(&model, &optimal_covariance_update(&model, &p, 4).unwrap())
            .unwrap();
        assert!((u.apply(&y).unwrap() - &exact).norm() < 1e-8 * exact.norm());
    }

    #[test]
    fn timing_ratio_is_positive() {
        let model = random_model(30, 40, 29);
        let (_, t) = setup(&model);
        let a = build_low_rank(&model, &t, 5).unwrap();
        let ratio = relative_cpu_time(&a, &model, 20).unwrap();
        assert!(ratio.is_finite() && ratio > 0.0);
    }

    #[test]
    fn cgls_sweep_matches_single_runs() {
        let model = random_model(8, 6, 41);
        let y = crate::rng::normal_vector(&mut crate::rng::stream(5, 0), 8);
        let orders = [0, 1, 3, 6, 9];
        let its = cgls_iterates(&model, &y, &orders).unwrap();
        for (k, it) in orders.iter().zip(&its) {
            let single = cgls_priorconditioned(&model, &y, *k).unwrap().x;
            assert!(
                (it - single).norm() < 1e-10 * (1.0 + it.norm()),
                "order {k}"
            );
        }
        assert!(cgls_iterates(&model, &y, &[2, 2]).is_err());
    }
}
