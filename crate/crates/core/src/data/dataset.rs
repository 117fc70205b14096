use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::denoiser::{CausalMasks, Conditioning};
use crate::error::{Error, Result};
use crate::numcore::seeded_rng;

/// Full potential-outcome information available only for generated data.
///
/// `mu*` are the noise-free conditional means and `sd*` the conditional
/// standard deviations of `Y(a) | X`, both Gaussian for every built-in DGP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub sd0: Vec<f64>,
    pub sd1: Vec<f64>,
    pub true_pi: Vec<f64>,
    pub true_cate: Vec<f64>,
}

impl Oracle {
    pub fn len(&self) -> usize {
        self.y0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y0.is_empty()
    }

    pub fn potential(&self, arm: usize) -> &[f64] {
        if arm == 0 {
            &self.y0
        } else {
            &self.y1
        }
    }

    pub fn mean(&self, arm: usize) -> &[f64] {
        if arm == 0 {
            &self.mu0
        } else {
            &self.mu1
        }
    }

    pub fn sd(&self, arm: usize) -> &[f64] {
        if arm == 0 {
            &self.sd0
        } else {
            &self.sd1
        }
    }

    fn fields(&self) -> [&Vec<f64>; 8] {
        [
            &self.y0,
            &self.y1,
            &self.mu0,
            &self.mu1,
            &self.sd0,
            &self.sd1,
            &self.true_pi,
            &self.true_cate,
        ]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |v: &Vec<f64>| rows.iter().map(|&r| v[r]).collect();
        Self {
            y0: pick(&self.y0),
            y1: pick(&self.y1),
            mu0: pick(&self.mu0),
            mu1: pick(&self.mu1),
            sd0: pick(&self.sd0),
            sd1: pick(&self.sd1),
            true_pi: pick(&self.true_pi),
            true_cate: pick(&self.true_cate),
        }
    }
}

/// Observational sample: covariates (row-major `n × d`), binary treatment,
/// observed outcome and per-unit causal masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    x: Vec<f64>,
    treatment: Vec<f64>,
    outcome: Vec<f64>,
    masks: Vec<CausalMasks>,
    covariate_names: Vec<String>,
    oracle: Option<Oracle>,
}

impl Dataset {
    /// Fully observed dataset with default column names `x1..xd`.
    pub fn new(x: Vec<f64>, d: usize, treatment: Vec<f64>, outcome: Vec<f64>) -> Result<Self> {
        let n = treatment.len();
        let masks = vec![CausalMasks::fully_observed(d); n];
        let names = (1..=d).map(|j| format!("x{j}")).collect();
        Self::with_masks(x, d, treatment, outcome, masks, names)
    }

    pub fn with_masks(
        x: Vec<f64>,
        d: usize,
        treatment: Vec<f64>,
        outcome: Vec<f64>,
        masks: Vec<CausalMasks>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = treatment.len();
        if d == 0 {
            return Err(Error::Parameter("need at least one covariate".into()));
        }
        if x.len() != n * d || outcome.len() != n || masks.len() != n {
            return Err(Error::Dimension(format!(
                "x has {} values, outcome {}, masks {}, for n={n}, d={d}",
                x.len(),
                outcome.len(),
                masks.len()
            )));
        }
        if covariate_names.len() != d {
            return Err(Error::Dimension(format!(
                "{} covariate names for d={d}",
                covariate_names.len()
            )));
        }
        if let Some(i) = treatment.iter().position(|&a| a != 0.0 && a != 1.0) {
            return Err(Error::Contract(format!(
                "treatment of unit {i} is {}, expected 0 or 1",
                treatment[i]
            )));
        }
        for m in &masks {
            m.validate()?;
            if m.covariate_dim() != d {
                return Err(Error::Dimension(format!(
                    "mask covers {} covariates, d={d}",
                    m.covariate_dim()
                )));
            }
        }
        if x.iter().chain(&outcome).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset values".into()));
        }
        Ok(Self {
            n,
            d,
            x,
            treatment,
            outcome,
            masks,
            covariate_names,
            oracle: None,
        })
    }

    /// Attaches oracle fields; requires `Y = A·Y1 + (1−A)·Y0` exactly.
    pub fn with_oracle(mut self, oracle: Oracle) -> Result<Self> {
        if oracle.fields().iter().any(|f| f.len() != self.n) {
            return Err(Error::Dimension("oracle fields must have n entries".into()));
        }
        for i in 0..self.n {
            let expected = if self.treatment[i] == 1.0 {
                oracle.y1[i]
            } else {
                oracle.y0[i]
            };
            if self.outcome[i] != expected {
                return Err(Error::Contract(format!(
                    "unit {i}: observed outcome differs from its potential outcome"
                )));
            }
        }
        self.oracle = Some(oracle);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn treatment(&self) -> &[f64] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn masks(&self) -> &[CausalMasks] {
        &self.masks
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn oracle(&self) -> Option<&Oracle> {
        self.oracle.as_ref()
    }

    pub fn require_oracle(&self) -> Result<&Oracle> {
        self.oracle
            .as_ref()
            .ok_or_else(|| Error::Contract("operation needs oracle potential outcomes".into()))
    }

    pub fn treated_count(&self) -> usize {
        self.treatment.iter().filter(|&&a| a == 1.0).count()
    }

    /// Conditioning rows for the observed treatments.
    pub fn conditioning(&self) -> Result<Conditioning> {
        Conditioning::new(&self.x, &self.treatment, &self.masks)
    }

    /// Covariate matrix with unobserved cells zeroed.
    pub fn masked_x(&self) -> Vec<f64> {
        let mut out = self.x.clone();
        for (i, m) in self.masks.iter().enumerate() {
            for j in 0..self.d {
                out[i * self.d + j] *= m.observed[j];
            }
        }
        out
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let mut x = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            x.extend_from_slice(self.x_row(r));
        }
        Self {
            n: rows.len(),
            d: self.d,
            x,
            treatment: rows.iter().map(|&r| self.treatment[r]).collect(),
            outcome: rows.iter().map(|&r| self.outcome[r]).collect(),
            masks: rows.iter().map(|&r| self.masks[r].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
            oracle: self.oracle.as_ref().map(|o| o.select(rows)),
        }
    }

    /// Same units with covariates and outcomes replaced (masks, treatment and
    /// oracle carried over unchanged).
    pub(crate) fn with_values(&self, x: Vec<f64>, outcome: Vec<f64>) -> Self {
        Self {
            x,
            outcome,
            oracle: None,
            ..self.clone()
        }
    }
}

/// Seeded shuffle of `0..n` split into `(train, test)` index sets.
pub fn split_indices(n: usize, fraction: f64, fold_seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Parameter(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Parameter(format!(
            "split of n={n} at {fraction} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(fold_seed));
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

pub fn split(data: &Dataset, fraction: f64, fold_seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(data.n(), fraction, fold_seed)?;
    Ok((data.select(&train), data.select(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        let x: Vec<f64> = (0..n * 2).map(|v| v as f64).collect();
        let a: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        Dataset::new(x, 2, a, y).unwrap()
    }

    #[test]
    fn split_sizes() {
        let (tr, te) = split(&tiny(10), 0.8, 3).unwrap();
        assert_eq!((tr.n(), te.n()), (8, 2));
    }

    #[test]
    fn split_partitions() {
        let (mut tr, te) = split_indices(57, 0.7, 9).unwrap();
        tr.extend(&te);
        tr.sort_unstable();
        assert_eq!(tr, (0..57).collect::<Vec<_>>());
    }

    #[test]
    fn split_deterministic() {
        assert_eq!(split_indices(100, 0.8, 1).unwrap(), split_indices(100, 0.8, 1).unwrap());
        assert_ne!(split_indices(100, 0.8, 1).unwrap(), split_indices(100, 0.8, 2).unwrap());
    }

    #[test]
    fn degenerate_split_rejected() {
        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
    }

    #[test]
    fn inconsistent_oracle_rejected() {
        let data = tiny(2);
        let o = Oracle {
            y0: vec![0.0, 9.0],
            y1: vec![9.0, 9.0],
            mu0: vec![0.0; 2],
            mu1: vec![0.0; 2],
            sd0: vec![1.0; 2],
            sd1: vec![1.0; 2],
            true_pi: vec![0.5; 2],
            true_cate: vec![0.0; 2],
        };
        assert!(data.with_oracle(o).is_err());
    }

    #[test]
    fn non_binary_treatment_rejected() {
        assert!(Dataset::new(vec![0.0], 1, vec![2.0], vec![0.0]).is_err());
    }
}
