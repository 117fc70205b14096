use serde::{Deserialize, Serialize};

use crate::data::{generate, Dataset, DgpSpec};
use crate::error::{Error, Result};
use crate::evaluation::samples::{cate_and_pehe, PosteriorSamples};
use crate::numcore::rng::mix64;
use crate::propensity::PerturbationMode;
use crate::training::{train, LossKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrthogonalityConfig {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub test_units: usize,
    /// Samples per unit and arm for the CATE estimate.
    pub m: usize,
}

impl Default for OrthogonalityConfig {
    fn default() -> Self {
        Self {
            sizes: vec![500, 1000, 2000, 4000, 8000],
            seeds: vec![0, 1, 2, 3, 4],
            test_units: 1000,
            m: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityRow {
    pub n: usize,
    pub seed: u64,
    pub pehe: f64,
}

pub const ORTHOGONALITY_COLUMNS: [&str; 3] = ["n", "seed", "pehe"];

impl OrthogonalityRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{:?}", self.n, self.seed, self.pehe)
    }
}

/// Per seed, one pool of `max(sizes) + test_units` units is drawn; the last
/// `test_units` form the fixed test set and the first `n` the training set,
/// so training sets are nested across sizes. Every cell trains with the
/// orthogonal loss on uniformly perturbed propensities. `on_row` sees each
/// row as soon as it is finished.
pub fn run_orthogonality_experiment(
    spec: &DgpSpec,
    config: &OrthogonalityConfig,
    train_config: &TrainConfig,
    mut on_row: impl FnMut(&OrthogonalityRow) -> Result<()>,
) -> Result<Vec<OrthogonalityRow>> {
    let n_max = *config
        .sizes
        .iter()
        .max()
        .ok_or_else(|| Error::Configuration("no training sizes".into()))?;
    if config.seeds.is_empty() || config.test_units == 0 || config.m < 2 {
        return Err(Error::Configuration("need seeds, test units and m ≥ 2".into()));
    }
    let mut rows = Vec::with_capacity(config.sizes.len() * config.seeds.len());
    for &seed in &config.seeds {
        let pool = generate(&DgpSpec {
            n: n_max + config.test_units,
            seed: mix64(spec.seed ^ seed),
            ..spec.clone()
        })?;
        pool.require_oracle()?;
        let test = pool.select(&(n_max..pool.n()).collect::<Vec<_>>());
        for &n in &config.sizes {
            let train_data = pool.select(&(0..n).collect::<Vec<_>>());
            let pehe = cell_pehe(&train_data, &test, train_config, config.m, seed)?;
            let row = OrthogonalityRow { n, seed, pehe };
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

fn cell_pehe(train_data: &Dataset, test: &Dataset, base: &TrainConfig, m: usize, seed: u64) -> Result<f64> {
    let cfg = TrainConfig {
        loss: LossKind::Orthogonal,
        perturbation: PerturbationMode::UniformRandom,
        seed: mix64(seed ^ train_data.n() as u64),
        checkpoint_dir: None,
        ..base.clone()
    };
    let model = train(train_data, &cfg)?;
    let samples = PosteriorSamples::draw(&model, test, m, mix64(cfg.seed ^ 0x5A))?;
    let (_, pehe) = cate_and_pehe(&samples, &test.require_oracle()?.true_cate)?;
    if !pehe.is_finite() {
        return Err(Error::NonFinite(format!("PEHE at n={}", train_data.n())));
    }
    Ok(pehe)
}

/// Median of each size's PEHE values, in the order of `sizes`.
pub fn median_by_size(rows: &[OrthogonalityRow], sizes: &[usize]) -> Vec<f64> {
    sizes
        .iter()
        .map(|&n| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.pehe).collect();
            v.sort_by(f64::total_cmp);
            match v.len() {
                0 => f64::NAN,
                k if k % 2 == 1 => v[k / 2],
                k => 0.5 * (v[k / 2 - 1] + v[k / 2]),
            }
        })
        .collect()
}
