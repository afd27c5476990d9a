//! Run configuration: one JSON document per run.

use std::fs;
use std::path::{Path, PathBuf};

use argmamba::data::{DatasetSpec, GeneratorSpec};
use argmamba::network::ModelConfig;
use argmamba::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Name of the resolved config written next to every command's outputs.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Split used for training, and evaluated by `eval`.
    pub split: String,
    /// Split scored after every epoch; may be absent from the dataset.
    pub val_split: Option<String>,
    pub seed: u64,
    /// `(split name, sample count)` for `generate-data`.
    pub splits: Vec<(String, usize)>,
    pub generator: GeneratorSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            split: "train".into(),
            val_split: Some("val".into()),
            seed: 7,
            splits: vec![("train".into(), 8), ("val".into(), 2)],
            generator: GeneratorSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed,
            splits: self.splits.clone(),
            generator: self.generator.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Token counts; each must be a perfect square.
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub channels: usize,
    pub state_dim: usize,
    /// ARGFM sizes above this are reported as skipped.
    pub argfm_max_tokens: usize,
    /// Bound on MS-SSM `median(largest) / median(smallest)`.
    pub max_ratio: f64,
    /// Shortest acceptable timed sample; faster forwards are looped.
    pub min_sample_ms: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1024, 4096, 16384],
            repeats: 20,
            channels: 8,
            state_dim: 4,
            argfm_max_tokens: 4096,
            max_ratio: 40.0,
            min_sample_ms: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            bench: BenchConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.generator.validate()?;
        if self.bench.repeats == 0 || self.bench.sizes.is_empty() {
            return Err(CliError::Usage("bench needs at least one size and one repeat".into()));
        }
        for &n in &self.bench.sizes {
            let side = (n as f64).sqrt().round() as usize;
            if side * side != n {
                return Err(CliError::Usage(format!("bench size {n} is not a square token count")));
            }
        }
        Ok(())
    }

    /// Writes the resolved config into `dir`, creating it.
    pub fn write_resolved(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir).map_err(argmamba::Error::from)?;
        let text = serde_json::to_string_pretty(self).map_err(argmamba::Error::from)?;
        fs::write(dir.join(RESOLVED_CONFIG_FILE), text).map_err(argmamba::Error::from)?;
        Ok(())
    }
}
