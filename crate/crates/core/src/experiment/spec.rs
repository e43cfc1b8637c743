use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covapprox::Provenance;
use crate::error::{Error, Result};
use crate::linalg::DEFAULT_DENSE_FALLBACK_DIM;
use crate::meanapprox::MeanKind;
use crate::problems::{HeatProblemConfig, Spectrum, TomographySetup};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub hessian: Spectrum,
    pub prior: Spectrum,
}

/// Problem family with its configuration. Realization seeds replace the
/// `seed` fields of the tomography and heat configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ProblemSpec {
    Synthetic(SyntheticSpec),
    Tomography(TomographySetup),
    Heat(HeatProblemConfig),
}

impl ProblemSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ProblemSpec::Synthetic(_) => "synthetic",
            ProblemSpec::Tomography(_) => "tomography",
            ProblemSpec::Heat(_) => "heat",
        }
    }

    /// `(m, n)` without building the problem.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            ProblemSpec::Synthetic(s) => (s.dim, s.dim),
            ProblemSpec::Tomography(t) => (t.sources * t.rays_per_source, t.grid * t.grid),
            ProblemSpec::Heat(h) => (
                h.sensors_per_side * h.sensors_per_side * h.observation_times,
                h.grid * h.grid,
            ),
        }
    }
}

/// One experiment: a problem family, the ranks to sweep and the methods
/// to evaluate over several realizations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub problem: ProblemSpec,
    /// Strictly increasing. Defaults to every rank `0..=n`.
    #[serde(default)]
    pub ranks: Option<Vec<usize>>,
    #[serde(default = "one")]
    pub realizations: usize,
    /// Realization `k` uses seed `seed + k`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub methods: Vec<Provenance>,
    #[serde(default)]
    pub mean_kinds: Vec<MeanKind>,
    /// Monte Carlo samples per Bayes-risk estimate; 0 skips the estimate.
    #[serde(default)]
    pub mc_samples: usize,
    /// Timing batches for the relative CPU time; 0 skips the timing,
    /// which is the only nondeterministic column.
    #[serde(default)]
    pub cpu_time_reps: usize,
    #[serde(default = "default_dense")]
    pub dense_fallback_dim: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
}

fn one() -> usize {
    1
}

fn default_dense() -> usize {
    DEFAULT_DENSE_FALLBACK_DIM
}

impl ExperimentSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(s).map_err(|e| Error::Config(format!("experiment spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.realizations == 0 {
            return bad("realizations must be at least 1".into());
        }
        if self.methods.is_empty() && self.mean_kinds.is_empty() {
            return bad("nothing to do: both methods and mean_kinds are empty".into());
        }
        if self.methods.contains(&Provenance::Custom) {
            return bad("method `custom` cannot be run from a spec".into());
        }
        if let Some(r) = &self.ranks {
            if r.is_empty() {
                return bad("ranks must not be empty".into());
            }
            if r.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("ranks must be strictly increasing, got {r:?}"));
            }
        }
        let (m, n) = self.problem.dims();
        if m == 0 || n == 0 {
            return bad(format!("problem has dimensions {m}x{n}"));
        }
        let top = self.resolved_ranks().last().copied().unwrap_or(0);
        if !self.methods.is_empty() && top > n {
            return bad(format!("rank {top} exceeds the parameter dimension {n}"));
        }
        let low_rank = self.mean_kinds.iter().any(|k| *k != MeanKind::Cgls);
        if low_rank && top > m.min(n) {
            return bad(format!(
                "mean approximation order {top} exceeds min(m, n) = {}",
                m.min(n)
            ));
        }
        if let Some(0) = self.threads {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }

    pub fn resolved_ranks(&self) -> Vec<usize> {
        match &self.ranks {
            Some(r) => r.clone(),
            None => {
                let (m, n) = self.problem.dims();
                let top = if self.methods.is_empty() { m.min(n) } else { n };
                (0..=top).collect()
            }
        }
    }

    /// SHA-256 of the semantic content: everything except `out` and
    /// `threads`, with ranks resolved.
    pub fn config_hash(&self) -> String {
        let mut s = self.clone();
        s.out = None;
        s.threads = None;
        s.ranks = Some(self.resolved_ranks());
        let json = serde_json::to_string(&s).expect("spec serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
