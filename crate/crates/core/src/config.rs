//! Experiment configuration shared by the command line and the bindings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate, load_csv, split, CsvSchema, Dataset, DgpSpec};
use crate::error::{Error, Result};
use crate::evaluation::{EvalConfig, OrthogonalityConfig, RegressorConfig};
use crate::numcore::rng::mix64;
use crate::training::TrainConfig;

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Dgp(DgpSpec),
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Dgp(DgpSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Root seed; every component seed is derived from it.
    pub seed: u64,
    pub data: DataSource,
    /// Fraction of units in the training split.
    pub train_fraction: f64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub orthogonality: OrthogonalityConfig,
    pub baselines: RegressorConfig,
    /// Output directory. Not part of the hash.
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::default(),
            train_fraction: 0.8,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            orthogonality: OrthogonalityConfig::default(),
            baselines: RegressorConfig::default(),
            out: PathBuf::from("runs/default"),
        }
    }
}

const DATA_STREAM: u64 = 0xDA7A;
const SPLIT_STREAM: u64 = 0x5B17;
const TRAIN_STREAM: u64 = 0x7EA1;
const EVAL_STREAM: u64 = 0xE7A1;

impl ExperimentConfig {
    /// Parses TOML, or JSON when the path ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let parsed = if is_json {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        };
        parsed.map_err(|e| match e {
            Error::Configuration(m) => Error::Configuration(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Configuration(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Reduced sizes for quick end-to-end runs.
    pub fn apply_smoke(&mut self) {
        if let DataSource::Dgp(spec) = &mut self.data {
            spec.n = 500;
        }
        self.train.epochs = 20;
        self.train.schedule.steps = 25;
        self.train.denoiser.hidden = 32;
        self.train.denoiser.embedding_dim = 32;
        self.train.denoiser.n_blocks = 2;
        self.train.propensity.max_epochs = 50;
        self.eval.m = 50;
        self.orthogonality.sizes = vec![250, 500, 1000];
        self.orthogonality.seeds = vec![0, 1, 2];
        self.orthogonality.test_units = 200;
        self.orthogonality.m = 50;
        self.baselines.max_epochs = 50;
    }

    /// Overwrites every component seed with one derived from `seed`.
    pub fn resolve_seeds(&mut self) {
        if let DataSource::Dgp(spec) = &mut self.data {
            spec.seed = mix64(self.seed ^ DATA_STREAM);
        }
        self.train.seed = mix64(self.seed ^ TRAIN_STREAM);
        self.eval.seed = mix64(self.seed ^ EVAL_STREAM);
    }

    pub fn split_seed(&self) -> u64 {
        mix64(self.seed ^ SPLIT_STREAM)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Configuration(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        if let DataSource::Dgp(spec) = &self.data {
            spec.validate()?;
        }
        self.train.validate()?;
        self.eval.validate()
    }

    /// Hex SHA-256 of the canonical JSON form (sorted keys, no whitespace)
    /// with `out` removed.
    pub fn hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self).map_err(|e| Error::Serialization(e.to_string()))?;
        if let Some(map) = value.as_object_mut() {
            map.remove("out");
        }
        let canonical = serde_json::to_string(&value).map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    /// `# config_hash=… seed=…` stamp for text artifacts (without the `#`).
    pub fn stamp(&self) -> Result<String> {
        Ok(format!("config_hash={} seed={}", self.hash()?, self.seed))
    }

    /// Full dataset from the configured source.
    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Dgp(spec) => generate(spec),
            DataSource::Csv { path, schema } => load_csv(path, schema),
        }
    }

    /// `(train, test)` split of [`Self::load_data`].
    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        split(&self.load_data()?, self.train_fraction, self.split_seed())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_fields_but_not_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.train.learning_rate = 1e-3;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn toml_round_trip() {
        let mut a = ExperimentConfig::default();
        a.apply_smoke();
        a.resolve_seeds();
        let back: ExperimentConfig = toml::from_str(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg: ExperimentConfig = toml::from_str("seed = 7\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.train.schedule.steps, 100);
    }
}
