//! Optimal low-rank approximations of Gaussian posteriors for linear
//! inverse problems.
//!
//! The model is `y = G x + e` with `e ~ N(0, Γobs)` and `x ~ N(0, Γpr)`.
//! The posterior covariance is approximated by rank-`r` negative
//! semidefinite updates of the prior covariance built from the leading
//! generalized eigenpairs of the pencil `(H, Γpr⁻¹)`, `H = Gᵀ Γobs⁻¹ G`.
//! The same eigenpairs give Bayes-risk optimal linear approximations of
//! the posterior mean.
//!
//! Module map:
//! - [`linalg`]: SPD matrices, square roots, operators and eigensolvers.
//! - [`model`]: the linear Gaussian model and its exact posterior.
//! - [`covapprox`]: optimal covariance/precision updates, the oblique
//!   projector and the suboptimal baselines.
//! - [`metrics`]: Förstner distance, KL, Hellinger and friends.
//! - [`meanapprox`]: low-rank and low-rank-update mean approximators.
//! - [`problems`]: synthetic spectra, X-ray tomography, heat equation.
//! - [`experiment`]: config-driven runner, result tables and plots.
//! - [`verify`]: the acceptance checks, shared by tests and the CLI.

pub mod covapprox;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod meanapprox;
pub mod metrics;
pub mod model;
pub mod problems;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
