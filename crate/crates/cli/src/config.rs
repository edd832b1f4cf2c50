//! Strict JSON experiment configurations.

use crate::error::CliError;
use peira_core::distributions::{make_product, make_two_state, perturb_distinct, JointTable};
use peira_core::objectives::Dynamics;
use peira_core::trainer::TrainerConfig;
use peira_core::Mat64;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use std::path::{Path, PathBuf};

/// A finite joint distribution.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TableSpec {
    /// Symmetric binary channel with correlation `rho`.
    TwoState { rho: f64 },
    /// Independent views, uniform marginals.
    Independent { nx: usize, ny: usize },
    /// Kronecker product of factor tables.
    Product { factors: Vec<TableSpec> },
    /// Nonnegative weights, normalized to sum to one.
    Explicit { weights: Vec<Vec<f64>> },
    /// `base` mixed with weight `eps` of a random positive table.
    Perturbed { base: Box<TableSpec>, eps: f64, seed: u64 },
}

impl TableSpec {
    pub fn build(&self) -> Result<JointTable<f64>, CliError> {
        Ok(match self {
            TableSpec::TwoState { rho } => make_two_state(*rho)?,
            TableSpec::Independent { nx, ny } => {
                if *nx == 0 || *ny == 0 {
                    return Err(CliError::Config("independent table needs positive sizes".into()));
                }
                JointTable::from_weights(Mat64::from_fn(*nx, *ny, |_, _| 1.0))?
            }
            TableSpec::Product { factors } => {
                let built = factors.iter().map(TableSpec::build).collect::<Result<Vec<_>, _>>()?;
                make_product(&built)?
            }
            TableSpec::Explicit { weights } => {
                let nx = weights.len();
                let ny = weights.first().map_or(0, Vec::len);
                if nx == 0 || ny == 0 || weights.iter().any(|r| r.len() != ny) {
                    return Err(CliError::Config("explicit weights must be a nonempty rectangular array".into()));
                }
                let flat = weights.iter().flatten().copied().collect();
                JointTable::from_weights(Mat64::from_vec(nx, ny, flat)?)?
            }
            TableSpec::Perturbed { base, eps, seed } => perturb_distinct(&base.build()?, *eps, *seed)?,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub table: TableSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowFileConfig {
    pub table: TableSpec,
    pub kind: Dynamics,
    pub lambda: f64,
    pub k: usize,
    pub t_end: f64,
    /// RK4 step; defaults to `lambda / 8`.
    #[serde(default)]
    pub step: Option<f64>,
    #[serde(default)]
    pub log_every: Option<usize>,
    #[serde(default)]
    pub stop_field_norm: Option<f64>,
    /// Function-space norm of the initial encoder; unscaled uniform entries
    /// on `[-1, 1]` when absent.
    #[serde(default)]
    pub init_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub table: TableSpec,
    pub kind: Dynamics,
    pub lambda: f64,
    pub k: usize,
    /// Closed-form versus finite-difference tolerance.
    #[serde(default = "default_agreement_tol")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_agreement_tol() -> f64 {
    1e-3
}

/// Training configuration: `table` and `out` plus every [`TrainerConfig`]
/// field at the top level.
#[derive(Debug, Clone)]
pub struct TrainFileConfig {
    pub table: TableSpec,
    pub out: Option<PathBuf>,
    pub trainer: TrainerConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportInput {
    /// Path to a `metrics.csv`, relative paths resolved against the config
    /// file's directory.
    pub metrics: PathBuf,
    pub lambda: f64,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub inputs: Vec<ReportInput>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

pub fn read_json(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("malformed JSON in {}: {e}", path.display())))
}

pub fn parse<T: DeserializeOwned>(value: serde_json::Value) -> Result<T, CliError> {
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("invalid configuration: {e}")))
}

impl TrainFileConfig {
    pub fn from_value(mut value: serde_json::Value) -> Result<Self, CliError> {
        let obj = value
            .as_object_mut()
            .ok_or_else(|| CliError::Config("training configuration must be a JSON object".into()))?;
        let table = obj
            .remove("table")
            .ok_or_else(|| CliError::Config("missing field `table`".into()))?;
        let out = obj.remove("out");
        Ok(TrainFileConfig {
            table: parse(table)?,
            out: match out {
                Some(v) => parse(v)?,
                None => None,
            },
            trainer: parse(value)?,
        })
    }
}
