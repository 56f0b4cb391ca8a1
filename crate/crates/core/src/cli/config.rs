//! Declarative run configuration read from TOML. Every field is optional;
//! command-line flags take precedence over anything set here.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use in2core::coreset::Strategy;
use in2core::influence::{DampingMode, Estimator};
use in2core::toy::{ClusterTask, MarkovTask, ModelConfig, TrainConfig};
use in2core::{Error, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out: Option<PathBuf>,
    pub inputs: Inputs,
    pub toy: ToySection,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub grads: GradsSection,
    pub influence: InfluenceSection,
    pub select: SelectSection,
    pub layer_budget: BudgetSection,
    pub coverage: CoverageSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub init_model: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub hessian: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub influence: Option<PathBuf>,
    pub train_embeddings: Option<PathBuf>,
    pub test_embeddings: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    /// `cluster` or `markov`.
    pub task: Option<String>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub name: Option<String>,
    pub cluster: Option<ClusterTask>,
    pub markov: Option<MarkovTask>,
    pub hessian_step: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradsSection {
    pub split: Option<String>,
    pub name: Option<String>,
    pub created_at: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceSection {
    pub estimator: Option<Estimator>,
    pub damping_mode: Option<DampingMode>,
    pub damping_value: Option<f64>,
    pub layer_limit: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    pub strategy: Option<Strategy>,
    pub fraction: Option<f64>,
    pub count: Option<usize>,
    pub seed: Option<u64>,
    pub bins: Option<usize>,
    pub compare: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub ks: Option<Vec<usize>>,
    pub budget: Option<u64>,
    pub min_rho: Option<f64>,
    pub subset: Option<usize>,
    pub subset_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageSection {
    pub name: Option<String>,
    pub length_bias_threshold: Option<f64>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingPath(path.to_path_buf()),
            _ => Error::Config(format!("cannot read {}: {e}", path.display())),
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
