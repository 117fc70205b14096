use serde::{Deserialize, Serialize};

use crate::data::dataset::Dataset;
use crate::error::{Error, Result};

/// Below this standard deviation a column is treated as constant (scale 1).
const MIN_SCALE: f64 = 1e-12;

/// Per-column affine map `z = (v − mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(columns: usize) -> Self {
        Self {
            mean: vec![0.0; columns],
            scale: vec![1.0; columns],
        }
    }

    /// Fits from row-major `values` (`columns` wide), using only cells where
    /// `keep(row, col)` holds.
    pub fn fit(values: &[f64], columns: usize, keep: impl Fn(usize, usize) -> bool) -> Self {
        let rows = values.len().checked_div(columns).unwrap_or(0);
        let mut mean = vec![0.0; columns];
        let mut scale = vec![1.0; columns];
        for j in 0..columns {
            let col: Vec<f64> = (0..rows)
                .filter(|&i| keep(i, j))
                .map(|i| values[i * columns + j])
                .collect();
            if col.is_empty() {
                continue;
            }
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64;
            mean[j] = m;
            let s = var.sqrt();
            scale[j] = if s > MIN_SCALE { s } else { 1.0 };
        }
        Self { mean, scale }
    }

    pub fn columns(&self) -> usize {
        self.mean.len()
    }

    pub fn forward(&self, j: usize, v: f64) -> f64 {
        (v - self.mean[j]) / self.scale[j]
    }

    pub fn inverse(&self, j: usize, z: f64) -> f64 {
        z * self.scale[j] + self.mean[j]
    }
}

/// Covariate and outcome standardization fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataScaler {
    pub covariates: Standardizer,
    pub outcome: Standardizer,
}

impl DataScaler {
    pub fn identity(d: usize) -> Self {
        Self {
            covariates: Standardizer::identity(d),
            outcome: Standardizer::identity(1),
        }
    }

    pub fn fit(train: &Dataset) -> Self {
        let d = train.d();
        let masks = train.masks();
        Self {
            covariates: Standardizer::fit(train.x(), d, |i, j| masks[i].observed[j] == 1.0),
            outcome: Standardizer::fit(train.outcome(), 1, |i, _| masks[i].outcome_target() == 1.0),
        }
    }

    /// Standardized copy; unobserved cells stay zero. Oracle fields are dropped.
    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        let d = data.d();
        if d != self.covariates.columns() {
            return Err(Error::Dimension(format!(
                "scaler fitted on {} covariates, data has {d}",
                self.covariates.columns()
            )));
        }
        let masks = data.masks();
        let mut x = data.x().to_vec();
        for (i, row) in x.chunks_mut(d).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if masks[i].observed[j] == 1.0 {
                    self.covariates.forward(j, *v)
                } else {
                    0.0
                };
            }
        }
        let y = data
            .outcome()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if masks[i].outcome_target() == 1.0 {
                    self.outcome.forward(0, v)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(data.with_values(x, y))
    }

    pub fn outcome_to_original(&self, z: f64) -> f64 {
        self.outcome.inverse(0, z)
    }

    pub fn outcome_to_standard(&self, v: f64) -> f64 {
        self.outcome.forward(0, v)
    }

    pub fn outcome_scale(&self) -> f64 {
        self.outcome.scale[0]
    }
}
