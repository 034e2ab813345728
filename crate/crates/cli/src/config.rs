use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lmbench_core::datasets::{ingest, DatasetIndex, DatasetSpec};
use lmbench_core::digest::canonical_hash;
use lmbench_core::eval::EvalOptions;
use lmbench_core::models::{Architecture, EncoderKind, ModelSpec, Pretrained};
use lmbench_core::train::TrainConfig;
use lmbench_core::transfer::{ChainSpec, ChainStart};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Overrides every dataset root with `<value>/<dataset name>`.
pub const DATA_ROOT_ENV: &str = "LMBENCH_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub encoder: EncoderKind,
    pub pretrained: Pretrained,
    #[serde(default = "one")]
    pub width_divisor: usize,
}

fn one() -> usize {
    1
}

fn five() -> usize {
    5
}

fn default_out() -> PathBuf {
    PathBuf::from("lmbench-out")
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::UnetPlusPlus,
            encoder: EncoderKind::Vgg19,
            pretrained: Pretrained::Imagenet,
            width_divisor: 1,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, out_channels: usize) -> ModelSpec {
        ModelSpec::new(self.architecture, self.encoder, out_channels)
            .with_pretrained(self.pretrained.clone())
            .with_width_divisor(self.width_divisor)
    }
}

/// Which chains `chain` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainSelection {
    /// Every ordered combination of the configured datasets.
    All { start: ChainStart, max_stages: usize },
    List(Vec<ChainSpec>),
}

/// One experiment, read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset trained and evaluated by `train`, `crossval` and `eval`.
    #[serde(default)]
    pub dataset: Option<String>,
    /// Dataset roots by name.
    #[serde(default)]
    pub datasets: BTreeMap<String, PathBuf>,
    /// Protocols for datasets that are not built in.
    #[serde(default)]
    pub dataset_specs: BTreeMap<String, DatasetSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub chains: Option<ChainSelection>,
    /// Reuse finished chain prefixes instead of retraining them.
    #[serde(default)]
    pub reuse_prefixes: bool,
    #[serde(default = "five")]
    pub folds: usize,
    /// Cross-validate every architecture and encoder pairing.
    #[serde(default)]
    pub grid: bool,
    /// Weights evaluated by `eval`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            datasets: BTreeMap::new(),
            dataset_specs: BTreeMap::new(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            chains: None,
            reuse_prefixes: false,
            folds: 5,
            grid: false,
            checkpoint: None,
            seed: 0,
            output_dir: default_out(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("invalid config {}: {e}", path.display())))
    }

    /// Applies command-line overrides. The seed also seeds training.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<&Path>) -> Self {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        self.train.seed = self.seed;
        if let Some(out) = out {
            self.output_dir = out.to_path_buf();
        }
        self
    }

    /// SHA-256 of the canonical JSON of everything except `output_dir`.
    pub fn hash(&self) -> Result<String, CliError> {
        let mut v = serde_json::to_value(self).map_err(CliError::validation)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        canonical_hash(&v).map_err(CliError::validation)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if self.folds < 2 {
            return Err(CliError::validation("folds must be at least 2"));
        }
        Ok(())
    }

    pub fn target(&self) -> Result<&str, CliError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::validation("config has no `dataset`"))
    }

    pub fn dataset_spec(&self, name: &str) -> Result<DatasetSpec, CliError> {
        self.dataset_specs
            .get(name)
            .cloned()
            .or_else(|| DatasetSpec::builtin(name))
            .ok_or_else(|| CliError::validation(format!("unknown dataset `{name}`; add it to dataset_specs")))
    }

    pub fn dataset_root(&self, name: &str) -> Result<PathBuf, CliError> {
        if let Some(base) = std::env::var_os(DATA_ROOT_ENV) {
            return Ok(PathBuf::from(base).join(name));
        }
        self.datasets
            .get(name)
            .cloned()
            .ok_or_else(|| CliError::validation(format!("no root configured for dataset `{name}`")))
    }

    pub fn index_path(&self, name: &str) -> PathBuf {
        self.output_dir.join(format!("{name}.index.json"))
    }

    /// The prepared index if present, otherwise a fresh ingest.
    pub fn load_index(&self, name: &str) -> Result<DatasetIndex, CliError> {
        let path = self.index_path(name);
        let spec = self.dataset_spec(name)?;
        if path.is_file() {
            let index = DatasetIndex::load(&path)?;
            if index.spec() == &spec {
                return Ok(index);
            }
            log::warn!("{} was prepared with another protocol; re-ingesting", path.display());
        }
        Ok(ingest(&self.dataset_root(name)?, &spec)?)
    }

    pub fn chain_list(&self) -> Result<Vec<ChainSpec>, CliError> {
        match &self.chains {
            Some(ChainSelection::List(list)) => Ok(list.clone()),
            Some(ChainSelection::All { start, max_stages }) => {
                let names: Vec<&str> = self.datasets.keys().map(String::as_str).collect();
                Ok(lmbench_core::transfer::enumerate_chains(&names, *max_stages, *start))
            }
            None => Err(CliError::validation("config has no `chains`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order_and_output_dir() {
        let a = r#"{"dataset": "hand", "seed": 3, "folds": 5, "output_dir": "x"}"#;
        let b = r#"{"output_dir": "y", "folds": 5, "seed": 3, "dataset": "hand"}"#;
        let ca: ExperimentConfig = serde_json::from_str(a).unwrap();
        let cb: ExperimentConfig = serde_json::from_str(b).unwrap();
        assert_eq!(ca.hash().unwrap(), cb.hash().unwrap());
        let cc = ca.clone().with_overrides(Some(4), None);
        assert_ne!(ca.hash().unwrap(), cc.hash().unwrap());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"datset": "hand"}"#).is_err());
    }
}
