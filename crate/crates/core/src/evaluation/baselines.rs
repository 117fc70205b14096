use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, DataScaler, Dataset};
use crate::error::{Error, Result};
use crate::numcore::rng::mix64;
use crate::numcore::{forward_mlp, seeded_rng, Activation, Adam, MlpParams, Parameterized, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            learning_rate: 1e-3,
            max_epochs: 300,
            batch_size: 256,
            patience: 20,
            validation_fraction: 0.1,
        }
    }
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len().max(1) as f64
}

/// Squared-error MLP regressor with Adam and validation early stopping.
pub fn fit_regressor(x: &[f64], d: usize, y: &[f64], config: &RegressorConfig, seed: u64) -> Result<MlpParams> {
    let n = y.len();
    if n == 0 || x.len() != n * d {
        return Err(Error::Dimension(format!(
            "{} inputs for {n} targets of width {d}",
            x.len()
        )));
    }
    let (train, val) = if n >= 20 {
        split_indices(n, 1.0 - config.validation_fraction, mix64(seed ^ 0x7A1))?
    } else {
        ((0..n).collect(), (0..n).collect())
    };
    let rows = |idx: &[usize]| -> Vec<f64> {
        idx.iter()
            .flat_map(|&i| x[i * d..(i + 1) * d].iter().copied())
            .collect()
    };
    let val_x = Tensor::new(vec![val.len(), d], rows(&val))?;
    let val_y: Vec<f64> = val.iter().map(|&i| y[i]).collect();

    let mut rng = seeded_rng(seed);
    let mut dims = vec![d];
    dims.extend(&config.hidden);
    dims.push(1);
    let mut params = MlpParams::init(&dims, Activation::Relu, Activation::Identity, &mut rng)?;
    let mut adam = Adam::for_params(config.learning_rate, &params.parameters());
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut order = train.clone();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let input = tape.constant(Tensor::new(vec![chunk.len(), d], rows(chunk))?);
            let target = tape.constant(Tensor::new(
                vec![chunk.len(), 1],
                chunk.iter().map(|&i| y[i]).collect(),
            )?);
            let out = params.forward_tape(&mut tape, input, &vars)?;
            let diff = tape.sub(out, target)?;
            let sq = tape.square(diff)?;
            let loss = tape.mean(sq)?;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
            adam.step(&mut params.parameters_mut(), &g)?;
        }
        let val_loss = mse(forward_mlp(&params, &val_x)?.data(), &val_y);
        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }
    Ok(best.2)
}

/// Point predictions `(μ̂_0(x), μ̂_1(x))` from a meta-learner.
#[derive(Clone, Debug, PartialEq)]
pub enum PointLearner {
    /// One regressor on `[x, a]`.
    S { scaler: DataScaler, model: MlpParams },
    /// One regressor per arm on `x`.
    T { scaler: DataScaler, models: [MlpParams; 2] },
}

fn fit_scaler(data: &Dataset) -> Result<(DataScaler, Dataset)> {
    let scaler = DataScaler::fit(data);
    let z = scaler.transform(data)?;
    Ok((scaler, z))
}

fn observed_rows(data: &Dataset, arm: Option<f64>) -> Vec<usize> {
    (0..data.n())
        .filter(|&i| data.masks()[i].outcome_target() == 1.0)
        .filter(|&i| arm.is_none_or(|a| data.treatment()[i] == a))
        .collect()
}

pub fn fit_s_learner(data: &Dataset, config: &RegressorConfig, seed: u64) -> Result<PointLearner> {
    let (scaler, z) = fit_scaler(data)?;
    let rows = observed_rows(&z, None);
    let d = z.d();
    let x = z.masked_x();
    let mut input = Vec::with_capacity(rows.len() * (d + 1));
    for &i in &rows {
        input.extend_from_slice(&x[i * d..(i + 1) * d]);
        input.push(z.treatment()[i]);
    }
    let y: Vec<f64> = rows.iter().map(|&i| z.outcome()[i]).collect();
    let model = fit_regressor(&input, d + 1, &y, config, seed)?;
    Ok(PointLearner::S { scaler, model })
}

pub fn fit_t_learner(data: &Dataset, config: &RegressorConfig, seed: u64) -> Result<PointLearner> {
    let (scaler, z) = fit_scaler(data)?;
    let d = z.d();
    let x = z.masked_x();
    let fit_arm = |arm: usize| -> Result<MlpParams> {
        let rows = observed_rows(&z, Some(arm as f64));
        if rows.is_empty() {
            return Err(Error::Unfittable(format!(
                "T-learner: no observed outcomes in arm {arm}"
            )));
        }
        let input: Vec<f64> = rows
            .iter()
            .flat_map(|&i| x[i * d..(i + 1) * d].iter().copied())
            .collect();
        let y: Vec<f64> = rows.iter().map(|&i| z.outcome()[i]).collect();
        fit_regressor(&input, d, &y, config, mix64(seed ^ arm as u64))
    };
    let models = [fit_arm(0)?, fit_arm(1)?];
    Ok(PointLearner::T { scaler, models })
}

impl PointLearner {
    /// `[μ̂_0, μ̂_1]` per unit in original outcome units.
    pub fn predict(&self, data: &Dataset) -> Result<[Vec<f64>; 2]> {
        let (scaler, raw) = match self {
            PointLearner::S { scaler, model } => {
                let z = scaler.transform(data)?;
                let (n, d) = (z.n(), z.d());
                let x = z.masked_x();
                let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
                for (arm, slot) in out.iter_mut().enumerate() {
                    let mut input = Vec::with_capacity(n * (d + 1));
                    for i in 0..n {
                        input.extend_from_slice(&x[i * d..(i + 1) * d]);
                        input.push(arm as f64);
                    }
                    *slot = forward_mlp(model, &Tensor::new(vec![n, d + 1], input)?)?.into_data();
                }
                (scaler, out)
            }
            PointLearner::T { scaler, models } => {
                let z = scaler.transform(data)?;
                let input = Tensor::new(vec![z.n(), z.d()], z.masked_x())?;
                (
                    scaler,
                    [
                        forward_mlp(&models[0], &input)?.into_data(),
                        forward_mlp(&models[1], &input)?.into_data(),
                    ],
                )
            }
        };
        Ok(raw.map(|v| v.into_iter().map(|z| scaler.outcome_to_original(z)).collect()))
    }
}

/// Both meta-learners. The T-learner is absent when an arm has no outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct StLearners {
    pub s_learner: PointLearner,
    pub t_learner: Option<PointLearner>,
}

pub fn fit_st_learners(data: &Dataset, config: &RegressorConfig, seed: u64) -> Result<StLearners> {
    let s_learner = fit_s_learner(data, config, mix64(seed ^ 0x5))?;
    let t_learner = match fit_t_learner(data, config, mix64(seed ^ 0x7)) {
        Ok(t) => Some(t),
        Err(Error::Unfittable(msg)) => {
            log::warn!("{msg}; continuing with the S-learner only");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(StLearners { s_learner, t_learner })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_arm_t_learner_fails_s_learner_proceeds() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let data = Dataset::new(x, 1, vec![1.0; 40], y).unwrap();
        let cfg = RegressorConfig {
            max_epochs: 5,
            ..RegressorConfig::default()
        };
        assert!(matches!(fit_t_learner(&data, &cfg, 0), Err(Error::Unfittable(_))));
        let both = fit_st_learners(&data, &cfg, 0).unwrap();
        assert!(both.t_learner.is_none());
        let [m0, m1] = both.s_learner.predict(&data).unwrap();
        assert_eq!(m0.len(), 40);
        assert_eq!(m1.len(), 40);
    }
}
