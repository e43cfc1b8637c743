//! Python bindings. Matrices cross the boundary as lists of rows.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use lowrank_bayes::covapprox::{
    bfgs_based_update, frobenius_based_update, hessian_based_update, optimal_covariance_update,
    prior_based_update, PencilDecomposition,
};
use lowrank_bayes::experiment::{self, ExperimentSpec};
use lowrank_bayes::linalg::{DenseOperator, EigOptions, SpdMatrix, DEFAULT_DENSE_FALLBACK_DIM};
use lowrank_bayes::meanapprox::{self, MeanKind};
use lowrank_bayes::metrics;
use lowrank_bayes::model::GaussianLinearModel;
use lowrank_bayes::problems::{make_synthetic, Spectrum, SyntheticSpectrumConfig};
use lowrank_bayes::verify::{run_criterion, VerifyOptions};
use lowrank_bayes::Error;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("matrix rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn spd(rows: &[Vec<f64>]) -> PyResult<SpdMatrix> {
    SpdMatrix::new(to_matrix(rows)?).map_err(py_err)
}

fn mean_kind(name: &str) -> PyResult<MeanKind> {
    match name {
        "low_rank" => Ok(MeanKind::LowRank),
        "low_rank_update" => Ok(MeanKind::LowRankUpdate),
        "cgls" => Ok(MeanKind::Cgls),
        _ => Err(PyValueError::new_err(format!(
            "unknown mean approximation `{name}`"
        ))),
    }
}

/// Linear Gaussian model `y = G x + ε` with zero prior mean.
#[pyclass(module = "lowrank_bayes", frozen)]
pub struct Model {
    inner: GaussianLinearModel,
}

#[pymethods]
impl Model {
    #[new]
    pub fn new(
        g: Vec<Vec<f64>>,
        gamma_obs: Vec<Vec<f64>>,
        gamma_pr: Vec<Vec<f64>>,
    ) -> PyResult<Self> {
        let inner = GaussianLinearModel::new(
            Arc::new(DenseOperator::new(to_matrix(&g)?)),
            spd(&gamma_obs)?,
            spd(&gamma_pr)?,
        )
        .map_err(py_err)?;
        Ok(Model { inner })
    }

    /// Model with Hessian spectrum `λ₀/k^α + τ` and prior spectrum
    /// `λ̃₀/k^α̃ + τ̃` in random orthogonal bases.
    #[staticmethod]
    #[pyo3(signature = (dim, hessian, prior, seed = 0))]
    pub fn synthetic(
        dim: usize,
        hessian: (f64, f64, f64),
        prior: (f64, f64, f64),
        seed: u64,
    ) -> PyResult<Self> {
        let spectrum = |(lambda0, alpha, tau): (f64, f64, f64)| Spectrum {
            lambda0,
            alpha,
            tau,
        };
        let cfg = SyntheticSpectrumConfig {
            dim,
            hessian: spectrum(hessian),
            prior: spectrum(prior),
            seed,
        };
        Ok(Model {
            inner: make_synthetic(&cfg).map_err(py_err)?.model,
        })
    }

    #[getter]
    pub fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    pub fn m(&self) -> usize {
        self.inner.m()
    }

    /// Every generalized eigenvalue `δᵢ²` of `(H, Γpr⁻¹)`, non-increasing.
    pub fn pencil_eigenvalues(&self) -> PyResult<Vec<f64>> {
        Ok(self.pencil()?.delta_sq.iter().copied().collect())
    }

    pub fn posterior_covariance(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(from_matrix(
            self.inner
                .exact_posterior()
                .map_err(py_err)?
                .gamma_pos
                .matrix(),
        ))
    }

    /// Rank-`r` approximate posterior covariance from `method`, one of
    /// `optimal`, `hessian`, `prior`, `frobenius` or `bfgs`.
    #[pyo3(signature = (r, method = "optimal", seed = 0))]
    pub fn covariance(&self, r: usize, method: &str, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let dl = DEFAULT_DENSE_FALLBACK_DIM;
        let m = &self.inner;
        let approx = match method {
            "optimal" => optimal_covariance_update(m, &self.pencil()?, r),
            "hessian" => hessian_based_update(m, r, dl),
            "prior" => prior_based_update(m, r),
            "frobenius" => frobenius_based_update(m, r, dl),
            "bfgs" => bfgs_based_update(m, r, seed, dl),
            _ => return Err(PyValueError::new_err(format!("unknown method `{method}`"))),
        }
        .map_err(py_err)?;
        Ok(from_matrix(&approx.covariance()))
    }

    /// Förstner distance from the exact posterior covariance to `sigma`.
    pub fn distance(&self, sigma: Vec<Vec<f64>>) -> PyResult<f64> {
        let post = self.inner.exact_posterior().map_err(py_err)?;
        metrics::forstner_distance(&post.gamma_pos, &spd(&sigma)?).map_err(py_err)
    }

    /// Closed-form Bayes risk of the order-`r` mean approximation.
    pub fn theoretical_risk(&self, kind: &str, r: usize) -> PyResult<Option<f64>> {
        let d2 = self.pencil_eigenvalues()?;
        Ok(meanapprox::theoretical_risk(
            mean_kind(kind)?,
            &d2,
            r,
            self.inner.n(),
        ))
    }

    /// Posterior mean for data `y`.
    pub fn posterior_mean(&self, y: Vec<f64>) -> PyResult<Vec<f64>> {
        let post = self.inner.exact_posterior().map_err(py_err)?;
        Ok(post
            .mean(&self.inner, &DVector::from_vec(y))
            .iter()
            .copied()
            .collect())
    }
}

impl Model {
    fn pencil(&self) -> PyResult<PencilDecomposition> {
        PencilDecomposition::compute(&self.inner, self.inner.n(), &EigOptions::default())
            .map_err(py_err)
    }
}

#[pyfunction]
pub fn forstner_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::forstner_distance(&spd(&a)?, &spd(&b)?).map_err(py_err)
}

/// First order at which every remaining `δᵢ²` is below one.
#[pyfunction]
pub fn crossover_order(delta_sq: Vec<f64>) -> usize {
    meanapprox::crossover_order(&delta_sq)
}

/// Runs an experiment given as TOML text and returns its rows as dicts.
#[pyfunction]
pub fn run_experiment(py: Python<'_>, spec: &str) -> PyResult<Vec<Py<pyo3::types::PyDict>>> {
    let spec = ExperimentSpec::from_toml_str(spec).map_err(py_err)?;
    let out = py.detach(|| experiment::run(&spec)).map_err(py_err)?;
    out.table
        .rows
        .iter()
        .map(|row| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("family", &row.family)?;
            d.set_item("method", &row.method)?;
            d.set_item("r", row.r)?;
            d.set_item("realization", row.realization)?;
            d.set_item("seed", row.seed)?;
            for (k, v) in [
                ("forstner", row.forstner),
                ("kl", row.kl),
                ("hellinger", row.hellinger),
                ("frobenius", row.frobenius),
                ("risk_theory", row.risk_theory),
                ("risk_mc", row.risk_mc),
                ("rel_cpu_time", row.rel_cpu_time),
                ("delta_sq_next", row.delta_sq_next),
                ("mean_err_sq", row.mean_err_sq),
                ("mean_err_rel", row.mean_err_rel),
            ] {
                d.set_item(k, v)?;
            }
            Ok(d.unbind())
        })
        .collect()
}

/// Runs one acceptance criterion; returns `(passed, detail)`.
#[pyfunction]
#[pyo3(signature = (criterion, seed = 2024))]
pub fn verify(py: Python<'_>, criterion: u32, seed: u64) -> PyResult<(bool, String)> {
    let r = py
        .detach(|| run_criterion(criterion, &VerifyOptions { seed }))
        .map_err(py_err)?;
    Ok((r.passed, r.detail))
}

#[pymodule]
#[pyo3(name = "lowrank_bayes")]
fn python_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(forstner_distance, m)?)?;
    m.add_function(wrap_pyfunction!(crossover_order, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
