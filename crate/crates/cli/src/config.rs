//! Run configuration: a TOML file or one of the named presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use signtrack_core::rng::DEFAULT_SEED;
use signtrack_core::{
    Algorithm, Coupling, DMatrix, DVector, FilterConfig, GeneratorMatrix, NoiseDist, RegimeModel, RegressorDist,
    Scenario, SignalModel,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Field { field: &'static str, message: String },
    #[error("unknown preset `{0}` (expected one of e_eq_mu, e_ll_mu, e_gg_mu)")]
    UnknownPreset(String),
}

fn field_err(field: &'static str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Field {
        field,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Track,
    Mse,
    Limits,
    Cumavg,
    Selftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSection {
    pub states: Vec<Vec<f64>>,
    pub generator: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegressorSpec {
    Gaussian { cov: Vec<Vec<f64>> },
    TruncatedGaussian { cov: Vec<Vec<f64>>, clip: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Gaussian { variance: f64 },
    TruncatedGaussian { variance: f64, clip: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSection {
    pub regressor: RegressorSpec,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub mu: f64,
    pub theta0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_guard: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MseSection {
    /// Extra stepsizes for a steady-state sweep; run lengths scale so that
    /// every point covers the same `n_steps · μ` horizon.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mu_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitsSection {
    pub horizon: f64,
    pub dt_ode: f64,
    pub deviation_reps: usize,
    pub diffusion_reps: usize,
}

impl Default for LimitsSection {
    fn default() -> Self {
        Self {
            horizon: 10.0,
            dt_ode: 1e-3,
            deviation_reps: 200,
            diffusion_reps: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            formats: vec![Format::Csv, Format::Json],
        }
    }
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_algorithms() -> Vec<Algorithm> {
    Algorithm::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<CommandKind>,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    pub n_steps: usize,
    pub replications: usize,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    pub regime: RegimeSection,
    pub signal: SignalSection,
    pub filter: FilterSection,
    pub coupling: Coupling,
    #[serde(default)]
    pub mse: MseSection,
    #[serde(default)]
    pub limits: LimitsSection,
    #[serde(default)]
    pub output: OutputSection,
}

pub const PRESETS: [&str; 3] = ["e_eq_mu", "e_ll_mu", "e_gg_mu"];

impl RunConfig {
    /// The three-state scalar setup with the chain scale tied to `μ = 0.05`
    /// by one of three couplings.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (coupling, n_steps) = match name {
            "e_eq_mu" => (Coupling::Proportional { c: 0.6 }, 1000),
            "e_ll_mu" => (Coupling::Slow { delta: 1.0 }, 10_000),
            "e_gg_mu" => (Coupling::Fast { gamma: 0.5 }, 1000),
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        Ok(Self {
            command: None,
            master_seed: DEFAULT_SEED,
            n_steps,
            replications: 200,
            algorithms: default_algorithms(),
            burn_in: None,
            regime: RegimeSection {
                states: vec![vec![-1.0], vec![0.0], vec![1.0]],
                generator: vec![vec![-0.6, 0.4, 0.2], vec![0.2, -0.5, 0.3], vec![0.4, 0.1, -0.5]],
                initial_dist: vec![0.75, 0.125, 0.125],
            },
            signal: SignalSection {
                regressor: RegressorSpec::Gaussian { cov: vec![vec![1.0]] },
                noise: NoiseSpec::Gaussian { variance: 0.25 },
            },
            filter: FilterSection {
                mu: 0.05,
                theta0: vec![0.0],
                divergence_guard: None,
            },
            coupling,
            mse: MseSection::default(),
            limits: LimitsSection::default(),
            output: OutputSection::default(),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical JSON encoding, ignoring where output goes.
    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut canonical = self.clone();
        canonical.output = OutputSection::default();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes to JSON");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn wants(&self, format: Format) -> bool {
        self.output.formats.contains(&format)
    }

    /// Validates the configuration and builds the simulation scenario; the
    /// filter runs the first listed algorithm.
    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        let algorithm = *self
            .algorithms
            .first()
            .ok_or_else(|| field_err("algorithms", "at least one algorithm is required"))?;
        let mut seen = self.algorithms.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.algorithms.len() {
            return Err(field_err("algorithms", "duplicate algorithm"));
        }

        let rows = &self.regime.generator;
        let generator = GeneratorMatrix::new(matrix(rows).map_err(|m| field_err("regime.generator", m))?)
            .map_err(|e| field_err("regime.generator", e))?;
        let states = self.regime.states.iter().map(|a| DVector::from_row_slice(a)).collect();
        let regime = RegimeModel::new(
            states,
            generator,
            0.0,
            DVector::from_row_slice(&self.regime.initial_dist),
        )
        .map_err(|e| field_err("regime", e))?;

        let regressor = match &self.signal.regressor {
            RegressorSpec::Gaussian { cov } => RegressorDist::Gaussian {
                cov: matrix(cov).map_err(|m| field_err("signal.regressor.cov", m))?,
            },
            RegressorSpec::TruncatedGaussian { cov, clip } => RegressorDist::TruncatedGaussian {
                cov: matrix(cov).map_err(|m| field_err("signal.regressor.cov", m))?,
                clip: *clip,
            },
        };
        let noise = match self.signal.noise {
            NoiseSpec::Gaussian { variance } => NoiseDist::Gaussian { variance },
            NoiseSpec::TruncatedGaussian { variance, clip } => NoiseDist::TruncatedGaussian { variance, clip },
        };
        let signal = SignalModel::new(regressor, noise).map_err(|e| field_err("signal", e))?;

        let mut filter = FilterConfig::new(algorithm, self.filter.mu, DVector::from_row_slice(&self.filter.theta0))
            .map_err(|e| field_err("filter", e))?;
        if let Some(guard) = self.filter.divergence_guard {
            if !(guard > 0.0) {
                return Err(field_err("filter.divergence_guard", "must be positive"));
            }
            filter.divergence_guard = guard;
        }
        if self.replications == 0 {
            return Err(field_err("replications", "must be at least 1"));
        }
        if self.mse.mu_grid.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(field_err("mse.mu_grid", "stepsizes must be positive"));
        }
        let l = &self.limits;
        if !(l.horizon > 0.0) || !(l.dt_ode > 0.0) || l.deviation_reps == 0 || l.diffusion_reps == 0 {
            return Err(field_err("limits", "horizon, dt_ode and replication counts must be positive"));
        }

        let mut scenario = Scenario::new(
            regime,
            signal,
            filter,
            self.coupling,
            self.n_steps,
            self.replications,
            self.master_seed,
        )
        .map_err(|e| field_err("coupling", e))?;
        scenario.burn_in = self.burn_in;
        Ok(scenario)
    }
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err("expected a non-empty rectangular array of rows".into());
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}
