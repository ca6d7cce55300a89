use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use iclc::compiler::ProgramSpec;
use iclc::metrics::MonteCarlo;
use iclc::probe::{ProbeConfig, ProbeTarget};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Compile(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Compile(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Compile(m) => write!(f, "compile: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<iclc::Error> for CliError {
    fn from(e: iclc::Error) -> Self {
        match e {
            iclc::Error::Compile(c) => CliError::Compile(c.to_string()),
            iclc::Error::Config(_) | iclc::Error::Json(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub program: Option<ProgramSpec>,
    pub trials: usize,
    pub seed: u64,
    /// Defaults to the program's own tolerance.
    pub tolerance: Option<f64>,
    /// Parameters file to run instead of compiling `program`.
    pub params: Option<PathBuf>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            program: None,
            trials: 1000,
            seed: 0,
            tolerance: None,
            params: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Noise {
    pub sigma2: f64,
    pub tau2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Spd,
    Ilwd,
    Mspd,
    R2,
    BayesRisk,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub d: usize,
    pub noise: Vec<Noise>,
    pub seed: u64,
    pub monte_carlo: MonteCarlo,
    /// Predictor pairs for SPD, ILWD and MSPD.
    pub pairs: Vec<[String; 2]>,
    /// Single predictors for R² linearity and Bayes risk.
    pub predictors: Vec<String>,
    pub metrics: Vec<MetricKind>,
    /// Context sizes for per-`n` metrics; empty means `1..=2d`.
    pub n_context: Vec<usize>,
    /// Query pool for ILWD and R²; defaults to `2d`.
    pub pool_size: Option<usize>,
    /// Context sizes averaged by the Bayes risk; defaults to `[1, d − 1]`.
    pub bayes_risk_range: Option<[usize; 2]>,
    /// Exponents `[lo, hi]` of a ridge grid `λ = 2^k` compared with the
    /// Bayes predictor by MSPD and Bayes risk.
    pub ridge_grid: Option<[i32; 2]>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            d: 8,
            noise: vec![Noise {
                sigma2: 0.25,
                tau2: 1.0,
            }],
            seed: 0,
            monte_carlo: MonteCarlo::default(),
            pairs: Vec::new(),
            predictors: Vec::new(),
            metrics: vec![MetricKind::Spd],
            n_context: Vec::new(),
            pool_size: None,
            bayes_risk_range: None,
            ridge_grid: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeRunConfig {
    pub d: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Layers to probe; empty means every layer.
    pub layers: Vec<usize>,
    pub targets: Vec<ProbeTarget>,
    pub n_range: Vec<usize>,
    /// Also probe the control model.
    pub control: bool,
    pub probe: ProbeConfig,
    /// Writes the main model's traces as JSON.
    pub trace_dump: Option<PathBuf>,
}

impl Default for ProbeRunConfig {
    fn default() -> Self {
        Self {
            d: 2,
            alpha: 0.3,
            lambda: 0.1,
            seed: 0,
            layers: Vec::new(),
            targets: vec![ProbeTarget::SgdWeights, ProbeTarget::Moments],
            n_range: vec![1],
            control: true,
            probe: ProbeConfig::default(),
            trace_dump: None,
        }
    }
}
