use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::write_plots;
use super::spec::{ExperimentSpec, ProblemSpec};
use super::table::{write_rows, EigenRow, ResultRow, ResultTable, RESULT_SCHEMA_VERSION};
use crate::covapprox::{
    bfgs_iterates_at, frobenius_based_updates, hessian_based_updates, optimal_covariance_update,
    prior_based_updates, CovarianceApproximation, PencilDecomposition, Provenance,
};
use crate::error::{Error, Result};
use crate::linalg::{gsvd_triplets, sym_eigenvalues, EigOptions, SpdMatrix};
use crate::meanapprox::{
    build_cgls, build_low_rank, build_low_rank_update, cgls_iterates, monte_carlo_cgls_risks,
    monte_carlo_risk, relative_cpu_time, theoretical_risk, weighted_norm, MeanApproximator,
    MeanKind,
};
use crate::metrics::{forstner_f, hellinger_from_pencil, kl_f, pencil_eigenvalues};
use crate::model::{ExactPosterior, GaussianLinearModel};
use crate::problems::{make_heat, make_synthetic, make_tomography, SyntheticSpectrumConfig};
use crate::verify::SPECTRA_GAP_THRESHOLD;

pub const RESULTS_FILE: &str = "results.csv";
pub const EIGENVALUES_FILE: &str = "eigenvalues.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub library_version: String,
    pub config_hash: String,
    /// Acceptance threshold for the controlled-spectra gap checks.
    pub spectra_gap_threshold: f64,
    pub family: String,
    pub m: usize,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub spec: ExperimentSpec,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub table: ResultTable,
    pub eigenvalues: Vec<EigenRow>,
    pub manifest: Manifest,
}

/// A model and one data realization.
pub struct Instance {
    pub model: GaussianLinearModel,
    pub y: DVector<f64>,
}

const TRUTH_STREAM: u64 = 0x7275;

pub fn build_instance(problem: &ProblemSpec, seed: u64) -> Result<Instance> {
    match problem {
        ProblemSpec::Synthetic(s) => {
            let p = make_synthetic(&SyntheticSpectrumConfig {
                dim: s.dim,
                hessian: s.hessian,
                prior: s.prior,
                seed,
            })?;
            let x = p
                .model
                .sample_prior(1, seed ^ TRUTH_STREAM)
                .column(0)
                .into_owned();
            let y = p.model.simulate_data(&x, seed)?;
            Ok(Instance { model: p.model, y })
        }
        ProblemSpec::Tomography(t) => {
            let mut t = t.clone();
            t.seed = seed;
            let p = make_tomography(&t)?;
            Ok(Instance {
                model: p.model,
                y: p.y,
            })
        }
        ProblemSpec::Heat(h) => {
            let mut h = h.clone();
            h.seed = seed;
            let p = make_heat(&h)?;
            Ok(Instance {
                model: p.model,
                y: p.y,
            })
        }
    }
}

/// Sort key: covariance methods, then mean approximators, each in a fixed
/// order.
fn method_order(name: &str) -> usize {
    const ORDER: [&str; 8] = [
        "optimal",
        "hessian",
        "prior",
        "frobenius",
        "bfgs",
        "low_rank",
        "low_rank_update",
        "cgls",
    ];
    ORDER.iter().position(|m| *m == name).unwrap_or(ORDER.len())
}

/// Runs every realization, concurrently on the current rayon pool, and
/// merges the rows in `(method, r, realization)` order.
pub fn run(spec: &ExperimentSpec) -> Result<RunOutput> {
    spec.validate()?;
    let ranks = spec.resolved_ranks();
    let seeds: Vec<u64> = (0..spec.realizations)
        .map(|k| spec.seed.wrapping_add(k as u64))
        .collect();
    let parts: Vec<Result<(Vec<ResultRow>, Vec<EigenRow>)>> = seeds
        .par_iter()
        .enumerate()
        .map(|(k, &seed)| run_realization(spec, &ranks, k, seed))
        .collect();
    let mut rows = Vec::new();
    let mut eigenvalues = Vec::new();
    for p in parts {
        let (r, e) = p?;
        rows.extend(r);
        eigenvalues.extend(e);
    }
    rows.sort_by(|a, b| {
        (method_order(&a.method), &a.method, a.r, a.realization).cmp(&(
            method_order(&b.method),
            &b.method,
            b.r,
            b.realization,
        ))
    });
    let (m, n) = spec.problem.dims();
    let mut resolved = spec.clone();
    resolved.ranks = Some(ranks);
    let manifest = Manifest {
        schema_version: RESULT_SCHEMA_VERSION,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: spec.config_hash(),
        spectra_gap_threshold: SPECTRA_GAP_THRESHOLD,
        family: spec.problem.family().to_string(),
        m,
        n,
        seeds,
        spec: resolved,
    };
    Ok(RunOutput {
        table: ResultTable { rows },
        eigenvalues,
        manifest,
    })
}

/// [`run`] on a pool of `threads` workers (all cores when `None`).
pub fn run_with_threads(spec: &ExperimentSpec, threads: Option<usize>) -> Result<RunOutput> {
    match threads {
        None => run(spec),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {t} threads: {e}")))?
            .install(|| run(spec)),
    }
}

/// Writes `results.csv`, `eigenvalues.csv`, `manifest.json` and the plots
/// into `dir`, creating it if needed. Returns the written paths.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Error::Config(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })?;
    let create = |name: &str| {
        let path = dir.join(name);
        std::fs::File::create(&path)
            .map(|f| (std::io::BufWriter::new(f), path.clone()))
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
    };
    let mut written = Vec::new();
    let (f, p) = create(RESULTS_FILE)?;
    out.table.write_csv(f)?;
    written.push(p);
    let (f, p) = create(EIGENVALUES_FILE)?;
    write_rows(f, &out.eigenvalues)?;
    written.push(p);
    let (f, p) = create(MANIFEST_FILE)?;
    serde_json::to_writer_pretty(f, &out.manifest)?;
    written.push(p);
    written.extend(write_plots(&out.table, &out.eigenvalues, dir)?);
    Ok(written)
}

struct Context<'a> {
    model: &'a GaussianLinearModel,
    post: ExactPosterior,
    pencil: PencilDecomposition,
    delta_sq: Vec<f64>,
    family: &'static str,
    realization: usize,
    seed: u64,
}

impl Context<'_> {
    fn row(&self, method: &str, r: usize) -> ResultRow {
        let mut row = ResultRow::new(self.family, method, r, self.realization, self.seed);
        row.delta_sq_next = self.delta_sq.get(r).copied();
        row
    }

    fn covariance_row(
        &self,
        method: Provenance,
        r: usize,
        cov: &DMatrix<f64>,
    ) -> Result<ResultRow> {
        let mut row = self.row(method.as_str(), r);
        let approx = SpdMatrix::from_symmetrized(cov.clone())?;
        let sigma = pencil_eigenvalues(&self.post.gamma_pos, &approx)?;
        row.forstner = Some(sigma.iter().map(|s| forstner_f(*s)).sum::<f64>().sqrt());
        row.kl = Some(sigma.iter().map(|s| kl_f(*s)).sum::<f64>().max(0.0));
        row.hellinger = Some(hellinger_from_pencil(sigma.as_slice()));
        row.frobenius = Some((self.post.gamma_pos.matrix() - cov).norm());
        Ok(row)
    }
}

/// Ranks grouped so one group of factors stays near 256 MB.
fn rank_chunks(ranks: &[usize], n: usize) -> Vec<Vec<usize>> {
    let budget = (1usize << 25).max(n);
    let mut out = vec![Vec::new()];
    let mut used = 0;
    for &r in ranks {
        let cost = r.max(1) * n;
        if used + cost > budget && !out.last().expect("nonempty").is_empty() {
            out.push(Vec::new());
            used = 0;
        }
        used += cost;
        out.last_mut().expect("nonempty").push(r);
    }
    out
}

fn run_realization(
    spec: &ExperimentSpec,
    ranks: &[usize],
    realization: usize,
    seed: u64,
) -> Result<(Vec<ResultRow>, Vec<EigenRow>)> {
    let inst = build_instance(&spec.problem, seed)?;
    let model = &inst.model;
    let n = model.n();
    let dl = spec.dense_fallback_dim;
    let opts = EigOptions {
        dense_fallback_dim: dl,
        ..EigOptions::default()
    };
    let post = model.exact_posterior_with_limit(dl)?;
    let pencil = PencilDecomposition::compute(model, n, &opts)?;
    let delta_sq: Vec<f64> = pencil.delta_sq.iter().copied().collect();
    let prior_eig = sym_eigenvalues(model.gamma_pr().matrix());
    let hess_eig = sym_eigenvalues(&model.hessian_dense(dl)?);
    let eigen = (0..n)
        .map(|i| EigenRow {
            realization,
            i: i + 1,
            delta_sq: delta_sq[i],
            prior_eig: prior_eig[i],
            hessian_eig: hess_eig[i],
        })
        .collect();
    let ctx = Context {
        model,
        post,
        pencil,
        delta_sq,
        family: spec.problem.family(),
        realization,
        seed,
    };
    let sweeps: Vec<Result<Vec<ResultRow>>> = spec
        .methods
        .par_iter()
        .map(|&method| covariance_sweep(&ctx, method, ranks, dl))
        .collect();
    let mut rows = Vec::new();
    for s in sweeps {
        rows.extend(s?);
    }
    if !spec.mean_kinds.is_empty() {
        rows.extend(mean_rows(spec, &ctx, ranks, &inst.y)?);
    }
    Ok((rows, eigen))
}

fn covariance_sweep(
    ctx: &Context<'_>,
    method: Provenance,
    ranks: &[usize],
    dl: usize,
) -> Result<Vec<ResultRow>> {
    let model = ctx.model;
    let n = model.n();
    let mut rows = Vec::new();
    if method == Provenance::Bfgs {
        let it = bfgs_iterates_at(model, ranks, ctx.seed, dl)?;
        for (&r, b) in ranks.iter().zip(&it.covariances) {
            rows.push(ctx.covariance_row(method, r, b)?);
        }
        return Ok(rows);
    }
    for chunk in rank_chunks(ranks, n) {
        let approx: Vec<CovarianceApproximation> = match method {
            Provenance::Optimal => chunk
                .iter()
                .map(|&r| optimal_covariance_update(model, &ctx.pencil, r))
                .collect::<Result<_>>()?,
            Provenance::Hessian => hessian_based_updates(model, &chunk, dl)?,
            Provenance::Prior => prior_based_updates(model, &chunk)?,
            Provenance::Frobenius => frobenius_based_updates(model, &chunk, dl)?,
            Provenance::Bfgs | Provenance::Custom => {
                unreachable!("filtered above and by validation")
            }
        };
        for (&r, a) in chunk.iter().zip(&approx) {
            rows.push(ctx.covariance_row(method, r, &a.covariance())?);
        }
    }
    Ok(rows)
}

fn mean_rows(
    spec: &ExperimentSpec,
    ctx: &Context<'_>,
    ranks: &[usize],
    y: &DVector<f64>,
) -> Result<Vec<ResultRow>> {
    let model = ctx.model;
    let n = model.n();
    let order_max = model.m().min(n);
    let needs_triplets = spec.mean_kinds.contains(&MeanKind::LowRank);
    let triplets = if needs_triplets {
        let top = ranks
            .iter()
            .copied()
            .filter(|r| *r <= order_max)
            .max()
            .unwrap_or(0);
        Some(gsvd_triplets(
            model.forward().as_ref(),
            &model.prior_sqrt(),
            &model.obs_sqrt(),
            top,
        )?)
    } else {
        None
    };
    let mu = ctx.post.mean(model, y);
    let mu_norm = weighted_norm(&ctx.post.precision, &mu);
    let mc_seed = ctx.seed.wrapping_add(0x6d63);
    let mut rows = Vec::new();
    for &kind in &spec.mean_kinds {
        let cgls = if kind == MeanKind::Cgls {
            let mc = if spec.mc_samples > 0 {
                Some(monte_carlo_cgls_risks(
                    model,
                    &ctx.post,
                    ranks,
                    spec.mc_samples,
                    mc_seed,
                )?)
            } else {
                None
            };
            Some((cgls_iterates(model, y, ranks)?, mc))
        } else {
            None
        };
        for (i, &r) in ranks.iter().enumerate() {
            let approx: MeanApproximator = match kind {
                MeanKind::LowRank => {
                    build_low_rank(model, triplets.as_ref().expect("computed above"), r)?
                }
                MeanKind::LowRankUpdate => build_low_rank_update(
                    model,
                    &optimal_covariance_update(model, &ctx.pencil, r)?,
                )?,
                MeanKind::Cgls => build_cgls(model, r),
            };
            let mut row = ctx.row(kind.as_str(), r);
            let est = match &cgls {
                Some((iterates, _)) => iterates[i].clone(),
                None => approx.apply(y)?,
            };
            let err = weighted_norm(&ctx.post.precision, &(est - &mu));
            row.mean_err_sq = Some(err * err);
            row.mean_err_rel = Some(if mu_norm > 0.0 { err / mu_norm } else { 0.0 });
            row.risk_theory = theoretical_risk(kind, &ctx.delta_sq, r, n);
            if let Some((_, Some(mc))) = &cgls {
                row.risk_mc = Some(mc[i]);
            } else if spec.mc_samples > 0 {
                row.risk_mc = Some(
                    monte_carlo_risk(
                        &approx,
                        model,
                        &ctx.post,
                        spec.mc_samples,
                        mc_seed,
                        row.risk_theory,
                    )?
                    .risk_mc,
                );
            }
            if spec.cpu_time_reps > 0 {
                row.rel_cpu_time = Some(relative_cpu_time(&approx, model, spec.cpu_time_reps)?);
            }
            rows.push(row);
        }
    }
    Ok(rows)
}
