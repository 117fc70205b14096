use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::metrics::pehe;
use crate::training::TrainedModel;

/// `m` sampled potential outcomes per unit and arm, stored unit-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub m: usize,
    pub seed: u64,
    pub units: usize,
    arms: [Vec<f64>; 2],
}

impl PosteriorSamples {
    pub fn new(m: usize, seed: u64, arm0: Vec<f64>, arm1: Vec<f64>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Parameter("m must be at least 1".into()));
        }
        if arm0.len() != arm1.len() || !arm0.len().is_multiple_of(m) {
            return Err(Error::Dimension(format!(
                "arm sample counts {} and {} for m={m}",
                arm0.len(),
                arm1.len()
            )));
        }
        if arm0.iter().chain(&arm1).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior samples".into()));
        }
        Ok(Self {
            m,
            seed,
            units: arm0.len() / m,
            arms: [arm0, arm1],
        })
    }

    /// Draws both arms for every unit of `data` with shared per-unit streams.
    pub fn draw(model: &TrainedModel, data: &Dataset, m: usize, seed: u64) -> Result<Self> {
        let arm0 = model.sample_arm(data, 0, m, seed)?;
        let arm1 = model.sample_arm(data, 1, m, seed)?;
        Self::new(m, seed, arm0, arm1)
    }

    pub fn unit(&self, i: usize, arm: usize) -> &[f64] {
        &self.arms[arm][i * self.m..(i + 1) * self.m]
    }

    pub fn arm(&self, arm: usize) -> &[f64] {
        &self.arms[arm]
    }

    /// Per-unit sample mean of one arm.
    pub fn means(&self, arm: usize) -> Vec<f64> {
        self.arms[arm]
            .chunks(self.m)
            .map(|c| c.iter().sum::<f64>() / self.m as f64)
            .collect()
    }
}

/// `τ̂_i = mean(Y(1) samples) − mean(Y(0) samples)` and its PEHE against `tau`.
pub fn cate_and_pehe(samples: &PosteriorSamples, oracle_cate: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (m0, m1) = (samples.means(0), samples.means(1));
    let tau_hat: Vec<f64> = m1.iter().zip(&m0).map(|(a, b)| a - b).collect();
    let p = pehe(&tau_hat, oracle_cate)?;
    Ok((tau_hat, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_layout() {
        let s = PosteriorSamples::new(2, 0, vec![1., 2., 3., 4.], vec![5., 6., 7., 8.]).unwrap();
        assert_eq!(s.units, 2);
        assert_eq!(s.unit(1, 1), &[7., 8.]);
        assert_eq!(s.means(0), vec![1.5, 3.5]);
    }

    #[test]
    fn mismatched_arms_rejected() {
        assert!(PosteriorSamples::new(2, 0, vec![1., 2.], vec![1.]).is_err());
    }
}
