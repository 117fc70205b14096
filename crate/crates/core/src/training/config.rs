use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::propensity::{PerturbationMode, PropensityConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Inverse-propensity-weighted noise regression.
    #[default]
    Orthogonal,
    /// Plain noise regression on the observational sample.
    Unweighted,
}

/// Held-out monitoring of the training objective. The parameters of the
/// epoch with the lowest validation loss are kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopping {
    pub validation_fraction: f64,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    /// Fixed `(t, ε)` draws per validation unit.
    pub draws_per_unit: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self {
            validation_fraction: 0.1,
            patience: 50,
            draws_per_unit: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub propensity: PropensityConfig,
    pub perturbation: PerturbationMode,
    /// Standardize covariates and outcomes on the training data.
    pub standardize: bool,
    /// Global gradient-norm cap; off when `None`.
    pub grad_clip: Option<f64>,
    /// A batch loss above this aborts training.
    pub divergence_threshold: f64,
    /// Decay of the parameter moving average that is validated and kept;
    /// raw parameters are used when `None`.
    pub ema_decay: Option<f64>,
    /// Off when `None`: all units train for exactly `epochs` epochs.
    pub early_stopping: Option<EarlyStopping>,
    /// Directory receiving `denoiser.ckpt` and `propensity.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 256,
            learning_rate: 5e-4,
            loss: LossKind::Orthogonal,
            seed: 0,
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            propensity: PropensityConfig::default(),
            perturbation: PerturbationMode::None,
            standardize: true,
            grad_clip: None,
            divergence_threshold: 1e6,
            ema_decay: Some(0.995),
            early_stopping: Some(EarlyStopping::default()),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {}", self.learning_rate)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Parameter(format!("gradient clip {c} must be positive")));
            }
        }
        if !self.denoiser.embedding_dim.is_multiple_of(2) || self.denoiser.embedding_dim == 0 {
            return Err(Error::Parameter("embedding dimension must be even".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Parameter(format!("EMA decay {d} outside [0, 1)")));
            }
        }
        if let Some(es) = &self.early_stopping {
            if !(es.validation_fraction > 0.0 && es.validation_fraction < 1.0) {
                return Err(Error::Parameter(format!(
                    "validation fraction {} outside (0, 1)",
                    es.validation_fraction
                )));
            }
            if es.patience == 0 || es.draws_per_unit == 0 {
                return Err(Error::Parameter("patience and draws per unit must be positive".into()));
            }
        }
        self.propensity.validate()
    }
}
