//! The acceptance checks. Each criterion builds its own models from fixed
//! seeds and reports pass or fail with a one-line summary; the same code
//! backs the `verify` subcommand and the `acceptance` test target.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::covapprox::{
    bfgs_based_update, bfgs_iterates, frobenius_based_update, hessian_based_update,
    hessian_based_updates, minimum_loss, optimal_covariance_update, prior_based_update,
    prior_based_updates, random_feasible_update, CovarianceApproximation, PencilDecomposition,
};
use crate::error::{Error, Result};
use crate::linalg::{adjoint_defect, gsvd_triplets, sym_eigenvalues, EigOptions, SpdMatrix};
use crate::meanapprox::{
    build_low_rank, build_low_rank_from_pencil, build_low_rank_update, crossover_order,
    monte_carlo_risk, risk_difference, theoretical_risk, weighted_norm, MeanKind,
};
use crate::metrics::{forstner_distance, hellinger_gaussians, kl_gaussians};
use crate::model::{ExactPosterior, GaussianLinearModel};
use crate::problems::{
    make_heat, make_synthetic, make_tomography, AngularRange, HeatProblemConfig, Spectrum,
    SyntheticSpectrumConfig, TomographySetup,
};
use crate::rng;

/// Largest relative gap, as a fraction of `d_opt(0)`, allowed between the
/// prior-based (flat Hessian) or Hessian-based (flat prior) curve and the
/// optimal one. Frozen after a pilot run that measured 2.1% and 4.0%.
pub const SPECTRA_GAP_THRESHOLD: f64 = 0.15;

/// Dense limit large enough for the 32×32 tomography instance.
pub const TOMOGRAPHY_DENSE_LIMIT: usize = 1100;

pub const CRITERIA: [(u32, &str); 11] = [
    (1, "optimality brute force"),
    (2, "closed-form loss"),
    (3, "diagonal oracle"),
    (4, "equivalence lemma"),
    (5, "Bayes risk"),
    (6, "crossover"),
    (7, "controlled-spectra curves"),
    (8, "tomography desk scale"),
    (9, "heat equation desk scale"),
    (10, "metric invariances"),
    (11, "full-rank exactness"),
];

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 2024 }
    }
}

#[derive(Clone, Debug)]
pub struct CriterionReport {
    pub id: u32,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} {} {}: {} ({:.1} s)",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.detail,
            self.seconds
        )
    }
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

pub fn run_criterion(id: u32, opts: &VerifyOptions) -> Result<CriterionReport> {
    let title = CRITERIA
        .iter()
        .find(|c| c.0 == id)
        .map(|c| c.1)
        .ok_or_else(|| {
            Error::Config(format!(
                "no acceptance criterion {id}; valid ids are 1 to 11"
            ))
        })?;
    let start = Instant::now();
    let res = match id {
        1 => c1_optimality(opts),
        2 => c2_closed_form(opts),
        3 => c3_diagonal(opts),
        4 => c4_equivalence(opts),
        5 => c5_bayes_risk(opts),
        6 => c6_crossover(opts),
        7 => c7_spectra_curves(opts),
        8 => c8_tomography(opts),
        9 => c9_heat(opts),
        10 => c10_invariances(opts),
        _ => c11_full_rank(opts),
    };
    let (passed, detail) = match res {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    Ok(CriterionReport {
        id,
        title,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_all(opts: &VerifyOptions) -> Vec<CriterionReport> {
    CRITERIA
        .iter()
        .map(|c| run_criterion(c.0, opts).expect("known criterion"))
        .collect()
}

fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize) -> SpdMatrix {
    let a = rng::normal_matrix(rng, n, n);
    SpdMatrix::from_symmetrized(&a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1)
        .expect("shifted Gram matrix is SPD")
}

/// Gaussian `G` with random SPD `Γobs` and `Γpr`.
pub fn random_model(m: usize, n: usize, seed: u64) -> Result<GaussianLinearModel> {
    let mut r = rng::stream(seed, 0x7e57);
    let g = rng::normal_matrix(&mut r, m, n);
    let obs = random_spd(&mut r, m);
    let pr = random_spd(&mut r, n);
    GaussianLinearModel::dense(g, obs, pr)
}

fn full_pencil(model: &GaussianLinearModel, dense_limit: usize) -> Result<PencilDecomposition> {
    let opts = EigOptions {
        dense_fallback_dim: dense_limit,
        ..EigOptions::default()
    };
    PencilDecomposition::compute(model, model.n(), &opts)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Förstner distance to a fixed posterior covariance, whitening once by its
/// Cholesky factor `L`: the eigenvalues of `L⁻¹ Σ L⁻ᵀ` are those of the
/// pencil `(Σ, Γpos)`.
pub struct PosteriorDistance {
    l: DMatrix<f64>,
}

impl PosteriorDistance {
    pub fn new(post: &ExactPosterior) -> Self {
        PosteriorDistance {
            l: post.gamma_pos.cholesky_factor().clone(),
        }
    }

    pub fn distance(&self, sigma: &DMatrix<f64>) -> f64 {
        let a = self
            .l
            .solve_lower_triangular(sigma)
            .expect("nonsingular factor");
        let b = self
            .l
            .solve_lower_triangular(&a.transpose())
            .expect("nonsingular factor");
        let ev = sym_eigenvalues(&b);
        if ev.iter().any(|v| *v <= 0.0) {
            return f64::INFINITY;
        }
        ev.iter().map(|v| v.ln().powi(2)).sum::<f64>().sqrt()
    }
}

fn c1_optimality(opts: &VerifyOptions) -> Result<Outcome> {
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    for k in 0..50u64 {
        let model = random_model(6, 6, opts.seed + k)?;
        let post = model.exact_posterior()?;
        let pencil = full_pencil(&model, 64)?;
        let mut r_rng = rng::stream(opts.seed + k, 0xc1);
        for r in 1..=5 {
            let d_opt = forstner_distance(
                &post.gamma_pos,
                &optimal_covariance_update(&model, &pencil, r)?.covariance_spd()?,
            )?;
            let mut others = vec![
                hessian_based_update(&model, r, 64)?,
                prior_based_update(&model, r)?,
                frobenius_based_update(&model, r, 64)?,
                bfgs_based_update(&model, r, opts.seed + k, 64)?,
            ];
            for _ in 0..200 {
                others.push(random_feasible_update(&model, r, &mut r_rng)?);
            }
            for o in &others {
                let d = forstner_distance(&post.gamma_pos, &o.covariance_spd()?)?;
                worst = worst.max(d_opt - d);
                if d_opt > d + 1e-10 {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        violations == 0,
        format!("50 models x r=1..5 x 204 competitors; max(d_opt - d_other) = {worst:.2e}, violations = {violations}"),
    )
}

fn c2_closed_form(opts: &VerifyOptions) -> Result<Outcome> {
    let mut worst = 0.0_f64;
    for k in 0..50u64 {
        let model = random_model(6, 6, opts.seed + k)?;
        let post = model.exact_posterior()?;
        let pencil = full_pencil(&model, 64)?;
        let d2: Vec<f64> = pencil.delta_sq.iter().copied().collect();
        for r in 0..=6 {
            let approx = optimal_covariance_update(&model, &pencil, r)?.covariance_spd()?;
            let measured = forstner_distance(&post.gamma_pos, &approx)?.powi(2);
            let predicted = minimum_loss(&d2, r, |x| x.ln().powi(2));
            worst = worst.max((measured - predicted).abs() / predicted.max(1.0));
        }
    }
    outcome(
        worst <= 1e-8,
        format!("max |d_F^2 - closed form| / max(1, closed form) = {worst:.2e} (tol 1e-8)"),
    )
}

fn c3_diagonal(opts: &VerifyOptions) -> Result<Outcome> {
    let n = 10;
    let mut r = rng::stream(opts.seed, 0xc3);
    let lam2: Vec<f64> = (0..n).map(|_| r.random_range(0.1..10.0)).collect();
    let sig2: Vec<f64> = (0..n).map(|_| r.random_range(0.1..10.0)).collect();
    let model = GaussianLinearModel::dense(
        DMatrix::identity(n, n),
        SpdMatrix::from_diagonal(&sig2)?,
        SpdMatrix::from_diagonal(&lam2)?,
    )?;
    let pencil = full_pencil(&model, 64)?;
    let mut expected: Vec<f64> = lam2.iter().zip(&sig2).map(|(l, s)| l / s).collect();
    expected.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let eig_err = pencil
        .delta_sq
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs() / b)
        .fold(0.0, f64::max);
    let full = optimal_covariance_update(&model, &pencil, n)?.covariance();
    let target = DMatrix::from_diagonal(&DVector::from_iterator(
        n,
        lam2.iter().zip(&sig2).map(|(l, s)| l * s / (s + l)),
    ));
    let cov_err = (&full - &target).amax() / target.amax();
    outcome(
        eig_err <= 1e-10 && cov_err <= 1e-10,
        format!("relative δ² error {eig_err:.2e}, Γ̂pos(n) error {cov_err:.2e} (tol 1e-10)"),
    )
}

fn c4_equivalence(opts: &VerifyOptions) -> Result<Outcome> {
    let mut agree = 0;
    let mut opt_wins = 0;
    for k in 0..20u64 {
        let model = random_model(6, 6, opts.seed + 100 + k)?;
        let post = model.exact_posterior()?;
        let pencil = full_pencil(&model, 64)?;
        let r = 1 + (k as usize % 5);
        let mut cands = vec![optimal_covariance_update(&model, &pencil, r)?];
        let mut rr = rng::stream(opts.seed + k, 0xc4);
        for _ in 0..50 {
            cands.push(random_feasible_update(&model, r, &mut rr)?);
        }
        let zero = DVector::zeros(model.n());
        let mut kl = Vec::new();
        let mut hel = Vec::new();
        let mut fo = Vec::new();
        for c in &cands {
            let s = c.covariance_spd()?;
            kl.push(kl_gaussians(&zero, &post.gamma_pos, &s)?);
            hel.push(hellinger_gaussians(&zero, &post.gamma_pos, &s)?);
            fo.push(forstner_distance(&post.gamma_pos, &s)?);
        }
        let argmin = |v: &[f64]| {
            v.iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .map(|p| p.0)
                .expect("nonempty")
        };
        let (a, b, c) = (argmin(&kl), argmin(&hel), argmin(&fo));
        if a == b && b == c {
            agree += 1;
        }
        if a == 0 && b == 0 && c == 0 {
            opt_wins += 1;
        }
    }
    outcome(
        agree == 20,
        format!("minimizers coincide on {agree}/20 models; optimal update chosen on {opt_wins}/20"),
    )
}

fn c5_bayes_risk(opts: &VerifyOptions) -> Result<Outcome> {
    let n = 8;
    let samples = 100_000;
    let mut max_z = 0.0_f64;
    let mut max_rel = 0.0_f64;
    let mut failures = 0;
    for k in 0..10u64 {
        let model = random_model(n, n, opts.seed + 200 + k)?;
        let post = model.exact_posterior()?;
        let pencil = full_pencil(&model, 64)?;
        let triplets = gsvd_triplets(
            model.forward().as_ref(),
            &model.prior_sqrt(),
            &model.obs_sqrt(),
            n,
        )?;
        let d2: Vec<f64> = pencil.delta_sq.iter().copied().collect();
        let mc_seed = opts.seed + 300 + k;
        for r in 0..=n {
            let lr = build_low_rank(&model, &triplets, r)?;
            let lru =
                build_low_rank_update(&model, &optimal_covariance_update(&model, &pencil, r)?)?;
            for (approx, kind) in [(lr, MeanKind::LowRank), (lru, MeanKind::LowRankUpdate)] {
                let theory = theoretical_risk(kind, &d2, r, n).expect("closed form");
                let rep = monte_carlo_risk(&approx, &model, &post, samples, mc_seed, Some(theory))?;
                let z = (rep.risk_mc - theory).abs() / rep.mc_stderr;
                let relative = (rep.risk_mc - theory).abs() / theory;
                max_z = max_z.max(z);
                max_rel = max_rel.max(relative);
                if z > 3.0 || relative >= 0.02 {
                    failures += 1;
                }
            }
        }
    }
    outcome(
        failures == 0,
        format!("10 models x r=0..8 x 2 kinds, N=1e5: max |z| = {max_z:.2}, max relative deviation = {:.2}%, failures = {failures}", 100.0 * max_rel),
    )
}

fn c6_crossover(opts: &VerifyOptions) -> Result<Outcome> {
    let n = 8;
    let mut mismatches = 0;
    let mut formula_err = 0.0_f64;
    let mut crossovers = Vec::new();
    for k in 0..10u64 {
        let mut rr = rng::stream(opts.seed + k, 0xc6);
        let big = rr.random_range(1..=4usize);
        let mut spectrum: Vec<f64> = (0..n)
            .map(|i| {
                if i < big {
                    rr.random_range(2.0..20.0)
                } else {
                    rr.random_range(0.01..0.5)
                }
            })
            .collect();
        spectrum.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        // G = diag(δ) Qᵀ S⁻¹ gives Sᵀ H S = Q diag(δ²) Qᵀ
        let pr = random_spd(&mut rr, n);
        let q = crate::problems::haar_orthogonal(&mut rr, n);
        let s_inv = pr
            .cholesky_factor()
            .clone()
            .try_inverse()
            .expect("nonsingular factor");
        let mut g = q.transpose() * s_inv;
        for (i, d2) in spectrum.iter().enumerate() {
            g.row_mut(i).scale_mut(d2.sqrt());
        }
        let model = GaussianLinearModel::dense(g, SpdMatrix::identity(n), pr)?;
        let pencil = full_pencil(&model, 64)?;
        let d2: Vec<f64> = pencil.delta_sq.iter().copied().collect();
        let cross = crossover_order(&d2);
        crossovers.push(cross);
        for r in 0..n {
            let a = theoretical_risk(MeanKind::LowRank, &d2, r, n).expect("closed form");
            let b = theoretical_risk(MeanKind::LowRankUpdate, &d2, r, n).expect("closed form");
            let diff = risk_difference(&d2, r);
            formula_err = formula_err.max((a - b - diff).abs() / a.max(b));
            let low_rank_better = a - b < 0.0;
            if low_rank_better != (r < cross) {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && formula_err <= 1e-12,
        format!(
            "10 engineered models, crossovers {crossovers:?}: sign mismatches = {mismatches}, difference formula error = {formula_err:.1e}"
        ),
    )
}

struct SpectraConfig {
    name: &'static str,
    hessian: Spectrum,
    prior: Spectrum,
}

fn spectra_configs() -> Vec<SpectraConfig> {
    let mut out = Vec::new();
    for alpha in [0.345, 0.690, 1.724] {
        for alpha_pr in [0.552, 1.103, 2.759] {
            out.push(SpectraConfig {
                name: "grid",
                hessian: Spectrum {
                    lambda0: 500.0,
                    alpha,
                    tau: 1e-6,
                },
                prior: Spectrum {
                    lambda0: 1.0,
                    alpha: alpha_pr,
                    tau: 1e-6,
                },
            });
        }
    }
    out.push(SpectraConfig {
        name: "flat_hessian",
        hessian: Spectrum {
            lambda0: 500.0,
            alpha: 0.345,
            tau: 1e-6,
        },
        prior: Spectrum {
            lambda0: 1.0,
            alpha: 2.0,
            tau: 1e-6,
        },
    });
    out.push(SpectraConfig {
        name: "flat_prior",
        hessian: Spectrum {
            lambda0: 500.0,
            alpha: 1.0,
            tau: 1e-9,
        },
        prior: Spectrum {
            lambda0: 1.0,
            alpha: 0.552,
            tau: 1e-9,
        },
    });
    out
}

/// Förstner distance curves `d[method][r]` for optimal, prior, Hessian and
/// BFGS updates of one synthetic realization.
pub fn spectra_curves(cfg: &SyntheticSpectrumConfig, dense_limit: usize) -> Result<[Vec<f64>; 4]> {
    let problem = make_synthetic(cfg)?;
    let model = &problem.model;
    let n = model.n();
    let ranks: Vec<usize> = (0..=n).collect();
    let post = model.exact_posterior_with_limit(dense_limit)?;
    let dist = PosteriorDistance::new(&post);
    let pencil = full_pencil(model, dense_limit)?;
    let mut opt = Vec::with_capacity(n + 1);
    for &r in &ranks {
        opt.push(dist.distance(&optimal_covariance_update(model, &pencil, r)?.covariance()));
    }
    let curve = |v: Vec<CovarianceApproximation>| {
        v.iter()
            .map(|c| dist.distance(&c.covariance()))
            .collect::<Vec<_>>()
    };
    let prior = curve(prior_based_updates(model, &ranks)?);
    let hess = curve(hessian_based_updates(model, &ranks, dense_limit)?);
    let bfgs: Vec<f64> = bfgs_iterates(model, n, cfg.seed, dense_limit)?
        .covariances
        .iter()
        .map(|b| dist.distance(b))
        .collect();
    Ok([opt, prior, hess, bfgs])
}

fn c7_spectra_curves(opts: &VerifyOptions) -> Result<Outcome> {
    let n = 100;
    let realizations = 20u64;
    let configs = spectra_configs();
    let mut jobs = Vec::new();
    for (ci, c) in configs.iter().enumerate() {
        for k in 0..realizations {
            jobs.push((
                ci,
                SyntheticSpectrumConfig {
                    dim: n,
                    hessian: c.hessian,
                    prior: c.prior,
                    seed: opts.seed + 1000 * ci as u64 + k,
                },
            ));
        }
    }
    let curves: Result<Vec<(usize, [Vec<f64>; 4])>> = jobs
        .par_iter()
        .map(|(ci, cfg)| Ok((*ci, spectra_curves(cfg, 512)?)))
        .collect();
    let curves = curves?;
    let mut violations = 0;
    let mut flat_hessian_gap = 0.0_f64;
    let mut flat_prior_gap = 0.0_f64;
    for (ci, [opt, prior, hess, bfgs]) in &curves {
        let slack = 1e-6 * opt[0].max(1.0);
        for r in 0..=n {
            for other in [prior, hess, bfgs] {
                if opt[r] > other[r] + slack {
                    violations += 1;
                }
            }
        }
        let gap = |other: &Vec<f64>| {
            (0..=n)
                .map(|r| (other[r] - opt[r]) / opt[0])
                .fold(0.0, f64::max)
        };
        match configs[*ci].name {
            "flat_hessian" => flat_hessian_gap = flat_hessian_gap.max(gap(prior)),
            "flat_prior" => flat_prior_gap = flat_prior_gap.max(gap(hess)),
            _ => {}
        }
    }
    outcome(
        violations == 0 && flat_hessian_gap < SPECTRA_GAP_THRESHOLD && flat_prior_gap < SPECTRA_GAP_THRESHOLD,
        format!(
            "{} configurations x {realizations} realizations, n={n}: dominance violations = {violations}; flat-Hessian prior-based gap {:.1}%, flat-prior Hessian-based gap {:.1}% (threshold {:.0}%)",
            configs.len(),
            100.0 * flat_hessian_gap,
            100.0 * flat_prior_gap,
            100.0 * SPECTRA_GAP_THRESHOLD
        ),
    )
}

/// Ranks at which the tomography distance curve is sampled.
pub fn tomography_ranks(max: usize) -> Vec<usize> {
    let mut v = vec![0, 1, 2, 5, 10, 20, 50, 100, 150, 200, 300, 400, 600, 800];
    v.retain(|r| *r < max);
    v.push(max);
    v
}

fn c8_tomography(opts: &VerifyOptions) -> Result<Outcome> {
    let limit = TOMOGRAPHY_DENSE_LIMIT;
    let limited = make_tomography(&TomographySetup {
        seed: opts.seed,
        ..TomographySetup::default()
    })?;
    let full = make_tomography(&TomographySetup {
        angular_range: AngularRange::Full360deg,
        seed: opts.seed,
        ..TomographySetup::default()
    })?;
    let model = &limited.model;
    let n = model.n();
    let post = model.exact_posterior_with_limit(limit)?;
    let pencil = full_pencil(model, limit)?;
    let pencil_full = full_pencil(&full.model, limit)?;

    let dist = PosteriorDistance::new(&post);
    let ranks = tomography_ranks(model.m().min(n));
    let d: Vec<f64> = ranks
        .iter()
        .map(|&r| Ok(dist.distance(&optimal_covariance_update(model, &pencil, r)?.covariance())))
        .collect::<Result<_>>()?;
    let monotone = d.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-10) + 1e-10);

    // every index past 10 at which both spectra are above round-off
    let floor = |p: &PencilDecomposition| {
        p.delta_sq
            .iter()
            .take_while(|v| **v > 1e-12 * p.delta_sq[0])
            .count()
    };
    let upto = floor(&pencil).min(floor(&pencil_full));
    let crossings: Vec<usize> = (10..upto)
        .filter(|&i| pencil.delta_sq[i] > pencil_full.delta_sq[i])
        .collect();
    let faster = crossings.len();
    let first = crossings
        .first()
        .map_or("none".to_string(), |i| i.to_string());

    let d2: Vec<f64> = pencil.delta_sq.iter().copied().collect();
    // first 1-based index with δ_r² < 1
    let r_star = (crossover_order(&d2) + 1).min(d2.len());
    let mu = post.mean(model, &limited.y);
    let norm = weighted_norm(&post.precision, &mu);
    let lr = build_low_rank_from_pencil(model, &pencil, r_star)?.apply(&limited.y)?;
    let lru = build_low_rank_update(model, &optimal_covariance_update(model, &pencil, r_star)?)?
        .apply(&limited.y)?;
    let err_lr = weighted_norm(&post.precision, &(lr - &mu)) / norm;
    let err_lru = weighted_norm(&post.precision, &(lru - &mu)) / norm;
    outcome(
        monotone && faster == 0 && err_lr < 0.05 && err_lru < 0.05,
        format!(
            "d_F non-increasing over {} ranks: {monotone} ({:.2} -> {:.2e}); limited-angle δ² above full-angle at {faster} of {} indices past 10 (first at {first}); normalized mean error at r={r_star}: low-rank {:.2}%, low-rank update {:.2}%",
            ranks.len(),
            d[0],
            d[d.len() - 1],
            upto.saturating_sub(10),
            100.0 * err_lr,
            100.0 * err_lru
        ),
    )
}

fn c9_heat(opts: &VerifyOptions) -> Result<Outcome> {
    let problem = make_heat(&HeatProblemConfig {
        seed: opts.seed,
        ..HeatProblemConfig::default()
    })?;
    let model = &problem.model;
    let defect = adjoint_defect(problem.forward.as_ref(), 20, opts.seed);
    let post = model.exact_posterior()?;
    let pencil = full_pencil(model, 512)?;
    let r_full = model.m().min(model.n());
    let mu = post.mean(model, &problem.y);
    let norm = weighted_norm(&post.precision, &mu);
    let lr = build_low_rank_from_pencil(model, &pencil, r_full)?.apply(&problem.y)?;
    let lru = build_low_rank_update(model, &optimal_covariance_update(model, &pencil, r_full)?)?
        .apply(&problem.y)?;
    let err_lr = weighted_norm(&post.precision, &(lr - &mu)) / norm;
    let err_lru = weighted_norm(&post.precision, &(lru - &mu)) / norm;
    let d2: Vec<f64> = pencil.delta_sq.iter().copied().collect();
    let cross = crossover_order(&d2);
    let n = model.n();
    let beats = (0..cross).all(|r| {
        theoretical_risk(MeanKind::LowRank, &d2, r, n)
            < theoretical_risk(MeanKind::LowRankUpdate, &d2, r, n)
    });
    outcome(
        defect <= 1e-9 && err_lr < 0.01 && err_lru < 0.01 && beats,
        format!(
            "adjoint defect {defect:.1e}; normalized error at r={r_full}: low-rank {:.1e}, low-rank update {:.1e}; low-rank risk lower for all {cross} under-resolved orders: {beats}",
            err_lr, err_lru
        ),
    )
}

fn c10_invariances(opts: &VerifyOptions) -> Result<Outcome> {
    let n = 10;
    let mut worst_inv = 0.0_f64;
    let mut worst_cong = 0.0_f64;
    let mut rr = rng::stream(opts.seed, 0xca);
    for _ in 0..100 {
        let a = random_spd(&mut rr, n);
        let b = random_spd(&mut rr, n);
        let d = forstner_distance(&a, &b)?;
        let ai = SpdMatrix::from_symmetrized(a.inverse())?;
        let bi = SpdMatrix::from_symmetrized(b.inverse())?;
        worst_inv = worst_inv.max((forstner_distance(&ai, &bi)? - d).abs() / d.max(1.0));
        let x = rng::normal_matrix(&mut rr, n, n);
        let xa = SpdMatrix::from_symmetrized(&x * a.matrix() * x.transpose())?;
        let xb = SpdMatrix::from_symmetrized(&x * b.matrix() * x.transpose())?;
        worst_cong = worst_cong.max((forstner_distance(&xa, &xb)? - d).abs() / d.max(1.0));
    }
    outcome(
        worst_inv <= 1e-8 && worst_cong <= 1e-8,
        format!("100 pairs: inversion error {worst_inv:.1e}, congruence error {worst_cong:.1e} (tol 1e-8)"),
    )
}

fn exactness(model: &GaussianLinearModel, dense_limit: usize) -> Result<(f64, f64, f64)> {
    let post = model.exact_posterior_with_limit(dense_limit)?;
    let pencil = full_pencil(model, dense_limit)?;
    let r = model.m().min(model.n());
    let cov = optimal_covariance_update(model, &pencil, r)?;
    let e_cov = rel(&cov.covariance(), post.gamma_pos.matrix());
    let triplets = gsvd_triplets(
        model.forward().as_ref(),
        &model.prior_sqrt(),
        &model.obs_sqrt(),
        r,
    )?;
    let a = build_low_rank(model, &triplets, r)?
        .dense_map()
        .expect("linear map");
    let ah = build_low_rank_update(model, &cov)?
        .dense_map()
        .expect("linear map");
    Ok((e_cov, rel(&a, &post.mean_map), rel(&ah, &post.mean_map)))
}

fn c11_full_rank(opts: &VerifyOptions) -> Result<Outcome> {
    let synthetic = make_synthetic(&SyntheticSpectrumConfig {
        dim: 100,
        hessian: Spectrum {
            lambda0: 500.0,
            alpha: 0.69,
            tau: 1e-6,
        },
        prior: Spectrum {
            lambda0: 1.0,
            alpha: 2.0,
            tau: 1e-6,
        },
        seed: opts.seed,
    })?;
    let tomo = make_tomography(&TomographySetup {
        seed: opts.seed,
        ..TomographySetup::default()
    })?;
    let heat = make_heat(&HeatProblemConfig {
        seed: opts.seed,
        ..HeatProblemConfig::default()
    })?;
    let wide = random_model(5, 9, opts.seed + 7)?;
    let tall = random_model(9, 5, opts.seed + 8)?;
    let families: Vec<(&str, GaussianLinearModel)> = vec![
        ("random 5x9", wide),
        ("random 9x5", tall),
        ("synthetic", synthetic.model),
        ("tomography", tomo.model),
        ("heat", heat.model),
    ];
    let mut worst = 0.0_f64;
    let mut parts = Vec::new();
    for (name, model) in &families {
        let (c, a, ah) = exactness(model, TOMOGRAPHY_DENSE_LIMIT)?;
        let w = c.max(a).max(ah);
        worst = worst.max(w);
        parts.push(format!(
            "{name} {w:.1e} (cov {c:.1e}, A* {a:.1e}, Â* {ah:.1e})"
        ));
    }
    // the pencil route to A* on a well-conditioned case
    let small = random_model(6, 4, opts.seed + 9)?;
    let pencil = full_pencil(&small, 64)?;
    let via_pencil = build_low_rank_from_pencil(&small, &pencil, 4)?
        .dense_map()
        .expect("linear map");
    let e = rel(&via_pencil, &small.exact_posterior()?.mean_map);
    worst = worst.max(e);
    parts.push(format!("pencil route {e:.1e}"));
    outcome(
        worst <= 1e-8,
        format!(
            "max relative error {worst:.1e} (tol 1e-8): {}",
            parts.join(", ")
        ),
    )
}
