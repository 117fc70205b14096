use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observation, target and conditioning indicators over one unit's slots.
///
/// Slots are laid out as `[x_1, ..., x_d, a, y]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalMasks {
    pub observed: Vec<f64>,
    pub target: Vec<f64>,
    pub conditional: Vec<f64>,
}

impl CausalMasks {
    /// Masks for a unit whose covariate cells are observed per
    /// `covariate_observed`; the treatment is always observed.
    pub fn for_unit(covariate_observed: &[bool], outcome_observed: bool) -> Self {
        let d = covariate_observed.len();
        let mut observed: Vec<f64> = covariate_observed.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        observed.push(1.0);
        observed.push(if outcome_observed { 1.0 } else { 0.0 });

        let mut target = vec![0.0; d + 2];
        target[d + 1] = observed[d + 1];

        let mut conditional = vec![1.0; d + 2];
        conditional[d + 1] = 0.0;
        Self {
            observed,
            target,
            conditional,
        }
    }

    pub fn fully_observed(covariates: usize) -> Self {
        Self::for_unit(&vec![true; covariates], true)
    }

    pub fn covariate_dim(&self) -> usize {
        self.observed.len().saturating_sub(2)
    }

    pub fn outcome_slot(&self) -> usize {
        self.observed.len() - 1
    }

    /// Loss weight of the outcome slot (1 where the outcome is a target).
    pub fn outcome_target(&self) -> f64 {
        self.target[self.outcome_slot()]
    }

    /// Indicator that covariate `j` enters the conditioning.
    pub fn covariate_gate(&self, j: usize) -> f64 {
        self.observed[j] * self.conditional[j]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.observed.len();
        if n < 2 || self.target.len() != n || self.conditional.len() != n {
            return Err(Error::Dimension(format!(
                "mask lengths {} / {} / {}",
                n,
                self.target.len(),
                self.conditional.len()
            )));
        }
        let binary = |v: &f64| *v == 0.0 || *v == 1.0;
        if !(self.observed.iter().all(binary) && self.target.iter().all(binary) && self.conditional.iter().all(binary))
        {
            return Err(Error::Contract("mask entries must be 0 or 1".into()));
        }
        for i in 0..n {
            if self.target[i] > self.observed[i] {
                return Err(Error::Contract(format!("target slot {i} is not observed")));
            }
            if self.target[i] * self.conditional[i] != 0.0 {
                return Err(Error::Contract(format!("slot {i} is both target and conditioning")));
            }
        }
        Ok(())
    }
}

/// Row-major conditioning features for a batch of units.
///
/// Each row is `[x ⊙ gate, a, gate]` where `gate = m_o ⊙ m_c` over the
/// covariate slots, so masked-out cells contribute exact zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    rows: usize,
    covariates: usize,
    features: Vec<f64>,
    target: Vec<f64>,
}

impl Conditioning {
    pub fn new(x: &[f64], treatment: &[f64], masks: &[CausalMasks]) -> Result<Self> {
        let rows = treatment.len();
        if masks.len() != rows {
            return Err(Error::Dimension(format!("{} masks for {rows} rows", masks.len())));
        }
        let covariates = x.len().checked_div(rows).unwrap_or(0);
        if covariates * rows != x.len() {
            return Err(Error::Dimension(format!(
                "{} covariate values for {rows} rows",
                x.len()
            )));
        }
        let width = 2 * covariates + 1;
        let mut features = Vec::with_capacity(rows * width);
        let mut target = Vec::with_capacity(rows);
        for i in 0..rows {
            let m = &masks[i];
            if m.covariate_dim() != covariates {
                return Err(Error::Dimension(format!(
                    "mask covers {} covariates, data has {covariates}",
                    m.covariate_dim()
                )));
            }
            let a = treatment[i];
            if a != 0.0 && a != 1.0 {
                return Err(Error::Contract(format!("treatment {a} is not binary")));
            }
            let xi = &x[i * covariates..(i + 1) * covariates];
            features.extend(xi.iter().enumerate().map(|(j, v)| v * m.covariate_gate(j)));
            features.push(a * m.observed[covariates] * m.conditional[covariates]);
            features.extend((0..covariates).map(|j| m.covariate_gate(j)));
            target.push(m.outcome_target());
        }
        Ok(Self {
            rows,
            covariates,
            features,
            target,
        })
    }

    /// Single fully observed unit.
    pub fn single(x: &[f64], treatment: f64) -> Result<Self> {
        Self::new(x, &[treatment], &[CausalMasks::fully_observed(x.len())])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.covariates + 1
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.feature_dim();
        &self.features[i * w..(i + 1) * w]
    }

    /// Outcome-slot target indicator per row.
    pub fn target(&self) -> &[f64] {
        &self.target
    }

    /// Copy with every row's treatment set to `a`.
    pub fn with_treatment(&self, a: f64) -> Self {
        let mut out = self.clone();
        let w = self.feature_dim();
        for i in 0..self.rows {
            out.features[i * w + self.covariates] = a;
        }
        out
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let w = self.feature_dim();
        let mut features = Vec::with_capacity(rows.len() * w);
        let mut target = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            target.push(self.target[r]);
        }
        Self {
            rows: rows.len(),
            covariates: self.covariates,
            features,
            target,
        }
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> Self {
        let idx: Vec<usize> = (0..self.rows).flat_map(|r| std::iter::repeat_n(r, times)).collect();
        self.select(&idx)
    }
}
