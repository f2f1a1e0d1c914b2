//! Experiment configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CliError, Result};
use crate::ehr::{GeneratorConfig, SplitSpec, Task};
use crate::interpret::InterpretConfig;
use crate::kg::{CleanConfig, DEFAULT_WARD_THRESHOLD};
use crate::model::ModelConfig;
use crate::training::{GridSpec, TrainConfig};

/// Where patients come from. At most one of `path` and `generator` may be
/// set; with neither, commands fall back to `--data`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory written by `gen-data`.
    pub path: Option<PathBuf>,
    pub generator: Option<GeneratorConfig>,
}

/// Knowledge-graph construction with the offline mocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgBuildConfig {
    /// Minimum visit co-occurrences before a pair is suggested.
    pub min_count: usize,
    /// Share of the rarer code's visits above which a pair gets a clinical relation.
    pub strong_ratio: f64,
    /// Fraction of candidates sent to the judge, capped by `clean.label_budget`.
    pub label_fraction: f64,
    pub embed_dim: usize,
    pub ward_threshold: f64,
    pub clean: CleanConfig,
}

impl Default for KgBuildConfig {
    fn default() -> Self {
        Self {
            min_count: 5,
            strong_ratio: 0.3,
            label_fraction: 0.3,
            embed_dim: 64,
            ward_threshold: DEFAULT_WARD_THRESHOLD,
            clean: CleanConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgConfig {
    /// KG TSV; when unset the model trains on an empty fact set.
    pub path: Option<PathBuf>,
    pub build: KgBuildConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { bootstrap: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Seeds data generation and model initialisation.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub kg: KgConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Search space for `gridsearch`; unset means the full default grid.
    pub grid: Option<GridSpec>,
    pub evaluate: EvalConfig,
    pub interpret: InterpretConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Mortality,
            seed: 0,
            out: None,
            data: DataConfig::default(),
            split: SplitSpec::default(),
            kg: KgConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            grid: None,
            evaluate: EvalConfig::default(),
            interpret: InterpretConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    /// Config file if given, else defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.path.is_some() && self.data.generator.is_some() {
            return Err(CliError::Config("set either data.path or data.generator, not both".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        if !(self.kg.build.label_fraction > 0.0 && self.kg.build.label_fraction <= 1.0) {
            return Err(CliError::Config("kg.build.label_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Sets every seed from one value.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
        self.kg.build.clean.seed = seed;
        self.evaluate.seed = seed;
        self.interpret.seed = seed;
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
