use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::data::{split_indices, DataScaler, Dataset};
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::diffusion::{sample_units, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::numcore::rng::mix64;
use crate::numcore::{clip_grad_norm, seeded_rng, Activation, Adam, Linear, MlpParams, Parameterized, Tape, Tensor};
use crate::propensity::{fit_propensity, PerturbationPolicy, PropensityModel, PropensityReport};
use crate::training::config::{LossKind, TrainConfig};
use crate::training::loss::{tape_loss, weighted_loss, NoiseDraws};

pub const DENOISER_FILE: &str = "denoiser.ckpt";
pub const PROPENSITY_FILE: &str = "propensity.ckpt";

const PROPENSITY_STREAM: u64 = 0x9E0F;
const INIT_STREAM: u64 = 0x1A17;
const TRAIN_STREAM: u64 = 0x7EA1;
const PERTURB_STREAM: u64 = 0x9E27;
const VALIDATION_STREAM: u64 = 0x5A1D;
/// Below this many validation units early stopping is skipped.
const MIN_VALIDATION_UNITS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Kish effective sample size `(Σw)² / Σw²` of the weights in each epoch.
    pub effective_sample_size: Vec<f64>,
    /// Weighted loss on the held-out units per epoch; empty without early stopping.
    pub validation_loss: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub propensity: Option<PropensityReport>,
    pub loss: LossKind,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }

    /// `epoch,mean_loss,ess` rows.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,ess\n");
        for (i, (l, e)) in self.epoch_loss.iter().zip(&self.effective_sample_size).enumerate() {
            s.push_str(&format!("{},{l:?},{e:?}\n", i + 1));
        }
        s
    }
}

/// Everything needed to sample potential outcomes for new units.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub denoiser: DenoiserModel,
    pub propensity: PropensityModel,
    pub schedule: NoiseSchedule,
    pub scaler: DataScaler,
    pub report: TrainReport,
    pub seed: u64,
}

fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Fits the propensity model, freezes it, then fits the denoiser on the
/// weighted noise-regression loss with Adam over shuffled mini-batches.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if data.n() == 0 {
        return Err(Error::Parameter("training data is empty".into()));
    }
    let scaler = if config.standardize {
        DataScaler::fit(data)
    } else {
        DataScaler::identity(data.d())
    };
    let std_data = scaler.transform(data)?;
    let propensity = fit_propensity(&std_data, &config.propensity, mix64(config.seed ^ PROPENSITY_STREAM))?;
    let weights = match config.loss {
        LossKind::Orthogonal => {
            let policy = PerturbationPolicy {
                mode: config.perturbation,
                seed: mix64(config.seed ^ PERTURB_STREAM),
            };
            propensity.weights(&std_data.masked_x(), std_data.treatment(), &policy)?
        }
        LossKind::Unweighted => vec![1.0; data.n()],
    };
    train_denoiser(&std_data, scaler, propensity, &weights, config)
}

/// Denoiser phase with precomputed per-unit weights. `data` must already be
/// standardized by `scaler`.
pub fn train_denoiser(
    data: &Dataset,
    scaler: DataScaler,
    propensity: PropensityModel,
    weights: &[f64],
    config: &TrainConfig,
) -> Result<TrainedModel> {
    if weights.len() != data.n() {
        return Err(Error::Dimension(format!(
            "{} weights for n={}",
            weights.len(),
            data.n()
        )));
    }
    let schedule = config.schedule.build()?;
    let mut model = DenoiserModel::new(
        config.denoiser.clone(),
        data.d(),
        schedule.steps(),
        &mut seeded_rng(mix64(config.seed ^ INIT_STREAM)),
    )?;
    let mut adam = Adam::for_params(config.learning_rate, &model.parameters());
    let mut rng = seeded_rng(mix64(config.seed ^ TRAIN_STREAM));
    let cond = data.conditioning()?;
    let row_weight: Vec<f64> = weights.iter().zip(cond.target()).map(|(w, m)| w * m).collect();
    let (fit_rows, validation) = validation_split(data, &cond, &row_weight, config, schedule.steps())?;
    let ess = effective_sample_size(&fit_rows.iter().map(|&i| row_weight[i]).collect::<Vec<_>>());

    let mut report = TrainReport {
        epoch_loss: Vec::with_capacity(config.epochs),
        epoch_seconds: Vec::with_capacity(config.epochs),
        effective_sample_size: Vec::with_capacity(config.epochs),
        validation_loss: Vec::new(),
        best_epoch: None,
        checkpoint: None,
        propensity: propensity.report().cloned(),
        loss: config.loss,
    };
    let mut ema = config.ema_decay.map(|d| Ema::new(&model, d));
    let mut best: Option<(f64, DenoiserModel)> = None;
    let mut order = fit_rows.clone();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let bc = cond.select(batch);
            let y0: Vec<f64> = batch.iter().map(|&i| data.outcome()[i]).collect();
            let bw: Vec<f64> = batch.iter().map(|&i| row_weight[i]).collect();
            let draws = NoiseDraws::draw(&mut rng, batch.len(), schedule.steps());

            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let loss = tape_loss(&mut tape, &model, &vars, &y0, &bc, &bw, &draws, &schedule)?;
            let value = tape.value(loss).data()[0];
            if !(value <= config.divergence_threshold) {
                return Err(Error::Divergence { epoch, loss: value });
            }
            let mut grads = tape.backward(loss)?;
            let mut g: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
            if let Some(max) = config.grad_clip {
                clip_grad_norm(&mut g, max);
            }
            adam.step(&mut model.parameters_mut(), &g)?;
            if let Some(e) = &mut ema {
                e.update(&model);
            }
            total += value * batch.len() as f64;
        }
        let mean = total / fit_rows.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        report.epoch_loss.push(mean);
        report.effective_sample_size.push(ess);

        if let Some(v) = &validation {
            let candidate = ema.as_ref().map_or_else(|| model.clone(), |e| e.model(&model));
            let loss = v.loss(&schedule, &candidate)?;
            report.validation_loss.push(loss);
            if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, candidate));
                report.best_epoch = Some(epoch);
            }
            report.epoch_seconds.push(start.elapsed().as_secs_f64());
            if epoch - report.best_epoch.unwrap_or(epoch) >= v.patience {
                log::info!("early stop at epoch {epoch}; keeping epoch {:?}", report.best_epoch);
                break;
            }
        } else {
            report.epoch_seconds.push(start.elapsed().as_secs_f64());
            report.best_epoch = Some(epoch);
        }
    }
    match (best, &ema) {
        (Some((_, m)), _) => model = m,
        (None, Some(e)) => model = e.model(&model),
        (None, None) => {}
    }

    let mut trained = TrainedModel {
        denoiser: model,
        propensity,
        schedule,
        scaler,
        report,
        seed: config.seed,
    };
    if let Some(dir) = &config.checkpoint_dir {
        trained.save(dir)?;
        trained.report.checkpoint = Some(dir.join(DENOISER_FILE));
    }
    Ok(trained)
}

/// Exponential moving average of the parameters with the usual warm-up
/// `min(decay, (1 + k) / (10 + k))` at update `k`.
struct Ema {
    decay: f64,
    updates: usize,
    params: Vec<Tensor>,
}

impl Ema {
    fn new(model: &DenoiserModel, decay: f64) -> Self {
        Self {
            decay,
            updates: 0,
            params: model.parameters().into_iter().cloned().collect(),
        }
    }

    fn update(&mut self, model: &DenoiserModel) {
        let k = self.updates as f64;
        let d = self.decay.min((1.0 + k) / (10.0 + k));
        for (avg, p) in self.params.iter_mut().zip(model.parameters()) {
            for (a, v) in avg.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * v;
            }
        }
        self.updates += 1;
    }

    /// `model` with the averaged parameters.
    fn model(&self, model: &DenoiserModel) -> DenoiserModel {
        let mut m = model.clone();
        for (dst, src) in m.parameters_mut().into_iter().zip(&self.params) {
            dst.data_mut().copy_from_slice(src.data());
        }
        m
    }
}

/// Held-out units replicated `draws_per_unit` times with fixed noise draws.
struct Validation {
    cond: crate::denoiser::Conditioning,
    y0: Vec<f64>,
    weights: Vec<f64>,
    draws: NoiseDraws,
    patience: usize,
}

impl Validation {
    fn loss(&self, schedule: &NoiseSchedule, model: &DenoiserModel) -> Result<f64> {
        Ok(weighted_loss(schedule, model, &self.y0, &self.cond, &self.weights, &self.draws)?.mean)
    }
}

/// `(fit rows, validation)`; every row fits when early stopping is off or
/// the held-out side would be too small.
fn validation_split(
    data: &Dataset,
    cond: &crate::denoiser::Conditioning,
    row_weight: &[f64],
    config: &TrainConfig,
    steps: usize,
) -> Result<(Vec<usize>, Option<Validation>)> {
    let all: Vec<usize> = (0..data.n()).collect();
    let Some(es) = &config.early_stopping else {
        return Ok((all, None));
    };
    let n_val = (es.validation_fraction * data.n() as f64).round() as usize;
    if n_val < MIN_VALIDATION_UNITS || n_val >= data.n() {
        log::warn!(
            "{} units leave {n_val} for validation; early stopping disabled",
            data.n()
        );
        return Ok((all, None));
    }
    let (fit, val) = split_indices(
        data.n(),
        1.0 - es.validation_fraction,
        mix64(config.seed ^ VALIDATION_STREAM),
    )?;
    let rep: Vec<usize> = val
        .iter()
        .flat_map(|&i| std::iter::repeat_n(i, es.draws_per_unit))
        .collect();
    let mut rng = seeded_rng(mix64(config.seed ^ VALIDATION_STREAM ^ 1));
    let validation = Validation {
        cond: cond.select(&rep),
        y0: rep.iter().map(|&i| data.outcome()[i]).collect(),
        // The mask is 0/1, so folding it in twice is harmless.
        weights: rep.iter().map(|&i| row_weight[i]).collect(),
        draws: NoiseDraws::draw(&mut rng, rep.len(), steps),
        patience: es.patience,
    };
    Ok((fit, Some(validation)))
}

impl TrainedModel {
    /// `per_unit` draws of `Y(arm)` for every unit of `data`, unit-major, in
    /// original outcome units. Unit `i` uses random stream `(seed, i)` in both
    /// arms, so the two arms share their noise.
    pub fn sample_arm(&self, data: &Dataset, arm: usize, per_unit: usize, seed: u64) -> Result<Vec<f64>> {
        if arm > 1 {
            return Err(Error::Parameter(format!("arm {arm} is not 0 or 1")));
        }
        let std_data = self.scaler.transform(data)?;
        let cond = std_data.conditioning()?.with_treatment(arm as f64);
        let z = sample_units(&self.schedule, &self.denoiser, &cond, per_unit, seed)?;
        Ok(z.into_iter().map(|v| self.scaler.outcome_to_original(v)).collect())
    }

    fn denoiser_meta(&self) -> serde_json::Value {
        json!({
            "kind": "denoiser",
            "architecture": self.denoiser.config(),
            "covariate_dim": self.denoiser.covariate_dim(),
            "schedule": self.schedule.config(),
            "seed": self.seed,
            "scaler": self.scaler,
            "training": {
                "loss": self.report.loss,
                "epochs": self.report.epoch_loss.len(),
                "final_loss": self.report.final_loss(),
            },
        })
    }

    fn propensity_meta(&self) -> serde_json::Value {
        let p = self.propensity.params();
        json!({
            "kind": "propensity",
            "dims": std::iter::once(p.in_dim()).chain(p.layers.iter().map(Linear::out_dim)).collect::<Vec<_>>(),
            "activations": p.activations,
            "clip": self.propensity.clip(),
            "report": self.propensity.report(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let params = |ps: Vec<&Tensor>| ps.into_iter().cloned().collect::<Vec<_>>();
        Checkpoint::new(self.denoiser_meta(), params(self.denoiser.parameters())).save(&dir.join(DENOISER_FILE))?;
        Checkpoint::new(self.propensity_meta(), params(self.propensity.params().parameters()))
            .save(&dir.join(PROPENSITY_FILE))
    }

    /// Restores a model saved by [`TrainedModel::save`]. The training report
    /// keeps only what the checkpoint header records.
    pub fn load(dir: &Path) -> Result<Self> {
        let den = Checkpoint::load(&dir.join(DENOISER_FILE))?;
        let prop = Checkpoint::load(&dir.join(PROPENSITY_FILE))?;
        let field = |c: &Checkpoint, k: &str| -> Result<serde_json::Value> {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Integrity(format!("checkpoint header lacks '{k}'")))
        };
        fn de<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T> {
            serde_json::from_value(v).map_err(|e| Error::Integrity(format!("checkpoint header: {e}")))
        }
        if field(&den, "kind")? != "denoiser" || field(&prop, "kind")? != "propensity" {
            return Err(Error::Integrity("checkpoint kinds do not match file names".into()));
        }
        let arch: DenoiserConfig = de(field(&den, "architecture")?)?;
        let covariate_dim: usize = de(field(&den, "covariate_dim")?)?;
        let schedule_cfg: ScheduleConfig = de(field(&den, "schedule")?)?;
        let seed: u64 = de(field(&den, "seed")?)?;
        let scaler: DataScaler = de(field(&den, "scaler")?)?;
        let training = field(&den, "training")?;
        let loss: LossKind = de(training.get("loss").cloned().unwrap_or(json!("orthogonal")))?;

        let schedule = schedule_cfg.build()?;
        let denoiser = DenoiserModel::from_parameters(arch, covariate_dim, schedule.steps(), den.tensors)?;

        let dims: Vec<usize> = de(field(&prop, "dims")?)?;
        let activations: Vec<Activation> = de(field(&prop, "activations")?)?;
        let clip: f64 = de(field(&prop, "clip")?)?;
        if prop.tensors.len() != 2 * activations.len() || dims.len() != activations.len() + 1 {
            return Err(Error::Integrity("propensity header and tensors disagree".into()));
        }
        let mut tensors = prop.tensors.into_iter();
        let mut layers = Vec::with_capacity(activations.len());
        for _ in 0..activations.len() {
            let (w, b) = (tensors.next().expect("counted"), tensors.next().expect("counted"));
            layers.push(Linear::from_parts(w, b)?);
        }
        let propensity = PropensityModel::new(MlpParams::new(layers, activations)?, clip)?;

        Ok(Self {
            denoiser,
            propensity,
            schedule,
            scaler,
            report: TrainReport {
                epoch_loss: Vec::new(),
                epoch_seconds: Vec::new(),
                effective_sample_size: Vec::new(),
                validation_loss: Vec::new(),
                best_epoch: None,
                checkpoint: Some(dir.join(DENOISER_FILE)),
                propensity: de(prop.meta.get("report").cloned().unwrap_or(json!(null)))?,
                loss,
            },
            seed,
        })
    }
}
