//! Treatment-assignment classifier, inverse-propensity weights and the
//! propensity perturbation used in robustness experiments.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, Dataset};
use crate::error::{Error, Result};
use crate::numcore::rng::mix64;
use crate::numcore::tape::softmax_rows;
use crate::numcore::{seeded_rng, Activation, Adam, MlpParams, Parameterized, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    /// L2 penalty on weight matrices (not biases), added to the gradient.
    pub weight_decay: f64,
    /// Estimates are clipped to `[clip, 1 − clip]`.
    pub clip: f64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            learning_rate: 1e-3,
            max_epochs: 300,
            batch_size: 256,
            patience: 20,
            validation_fraction: 0.1,
            weight_decay: 1e-2,
            clip: 0.01,
        }
    }
}

impl PropensityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 0.5) {
            return Err(Error::Parameter(format!("clip {} outside (0, 0.5)", self.clip)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Parameter("batch size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub validation_log_loss: f64,
    /// Share of training units whose estimate hit a clipping bound.
    pub clipped_fraction: f64,
}

/// Frozen classifier `g_φ(x) = softmax(MLP(x))`, `π̂(x) = g_φ(x)[1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    params: MlpParams,
    clip: f64,
    report: Option<PropensityReport>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    #[default]
    None,
    /// `π̂(x)` replaced by an independent `Uniform(δ, 1 − δ)` value per unit.
    UniformRandom,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationPolicy {
    pub mode: PerturbationMode,
    pub seed: u64,
}

impl PerturbationPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn uniform(seed: u64) -> Self {
        Self {
            mode: PerturbationMode::UniformRandom,
            seed,
        }
    }

    /// The (possibly replaced) estimate for a unit with covariates `x`.
    ///
    /// The uniform replacement is a hash of `(seed, x)`, so a unit keeps the
    /// same value across epochs and the value carries no information about
    /// `x` beyond identity.
    pub fn apply(&self, x: &[f64], pi_hat: f64, clip: f64) -> f64 {
        match self.mode {
            PerturbationMode::None => pi_hat,
            PerturbationMode::UniformRandom => {
                let mut h = mix64(self.seed ^ 0x005E_ED0F_AB1E);
                for v in x {
                    h = mix64(h ^ v.to_bits());
                }
                let u = (h >> 11) as f64 / (1u64 << 53) as f64;
                clip + (1.0 - 2.0 * clip) * u
            }
        }
    }
}

/// `a/π + (1 − a)/(1 − π)`.
pub fn ipw(pi: f64, a: f64) -> f64 {
    a / pi + (1.0 - a) / (1.0 - pi)
}

fn clip_prob(p: f64, clip: f64) -> f64 {
    p.clamp(clip, 1.0 - clip)
}

impl PropensityModel {
    pub fn new(params: MlpParams, clip: f64) -> Result<Self> {
        if params.out_dim() != 2 {
            return Err(Error::Dimension(format!(
                "propensity head must have 2 outputs, has {}",
                params.out_dim()
            )));
        }
        if !(clip > 0.0 && clip < 0.5) {
            return Err(Error::Parameter(format!("clip {clip} outside (0, 0.5)")));
        }
        Ok(Self {
            params,
            clip,
            report: None,
        })
    }

    /// Model whose estimate is `p` everywhere (zero weights, bias = logit).
    pub fn constant(d: usize, p: f64, clip: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Parameter(format!("constant propensity {p} outside (0, 1)")));
        }
        let layer = crate::numcore::Linear::from_parts(
            Tensor::zeros(&[d, 2]),
            Tensor::vector(vec![0.0, (p / (1.0 - p)).ln()])?,
        )?;
        Self::new(MlpParams::new(vec![layer], vec![Activation::Softmax])?, clip)
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn covariate_dim(&self) -> usize {
        self.params.in_dim()
    }

    pub fn report(&self) -> Option<&PropensityReport> {
        self.report.as_ref()
    }

    /// Unclipped softmax output for class 1, one per row of `x`.
    pub fn raw_probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.covariate_dim();
        if !x.len().is_multiple_of(d) {
            return Err(Error::Dimension(format!(
                "{} values is not a multiple of d={d}",
                x.len()
            )));
        }
        let logits = self.logits(&Tensor::new(vec![x.len() / d, d], x.to_vec())?)?;
        let probs = softmax_rows(&logits)?;
        Ok(probs.data().chunks(2).map(|r| r[1]).collect())
    }

    /// Clipped `π̂(x)` per row.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .raw_probabilities(x)?
            .into_iter()
            .map(|p| clip_prob(p, self.clip))
            .collect())
    }

    /// Inverse-propensity weight per unit under `policy`.
    pub fn weights(&self, x: &[f64], a: &[f64], policy: &PerturbationPolicy) -> Result<Vec<f64>> {
        let pi = self.predict(x)?;
        if pi.len() != a.len() {
            return Err(Error::Dimension(format!(
                "{} treatments for {} rows",
                a.len(),
                pi.len()
            )));
        }
        let d = self.covariate_dim();
        Ok(pi
            .iter()
            .zip(a)
            .enumerate()
            .map(|(i, (&p, &ai))| ipw(policy.apply(&x[i * d..(i + 1) * d], p, self.clip), ai))
            .collect())
    }

    /// Single-unit weight.
    pub fn weight(&self, x: &[f64], a: f64, policy: &PerturbationPolicy) -> Result<f64> {
        Ok(self.weights(x, &[a], policy)?[0])
    }

    /// Mean binary cross-entropy of the clipped estimates.
    pub fn log_loss(&self, x: &[f64], a: &[f64]) -> Result<f64> {
        let pi = self.predict(x)?;
        Ok(binary_log_loss(&pi, a))
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let layers = &self.params.layers;
        let mut h = x.clone();
        for (i, layer) in layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < layers.len() {
                h = h.map(|v| match self.params.activations[i] {
                    Activation::Relu => v.max(0.0),
                    Activation::Silu => crate::numcore::mlp::silu(v),
                    _ => v,
                });
            }
        }
        Ok(h)
    }
}

pub fn binary_log_loss(pi: &[f64], a: &[f64]) -> f64 {
    let total: f64 = pi
        .iter()
        .zip(a)
        .map(|(&p, &ai)| -(ai * p.ln() + (1.0 - ai) * (1.0 - p).ln()))
        .sum();
    total / pi.len().max(1) as f64
}

fn batch_loss(
    params: &MlpParams,
    x: &[f64],
    d: usize,
    labels: &[usize],
    tape: &mut Tape,
) -> Result<(crate::numcore::Var, Vec<crate::numcore::Var>)> {
    let vars = params.register(tape);
    let input = tape.constant(Tensor::new(vec![labels.len(), d], x.to_vec())?);
    let mut h = input;
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        h = layer.forward_tape(tape, h, &vars[2 * i..2 * i + 2])?;
        if i < last {
            h = params.activations[i].apply_tape(tape, h)?;
        }
    }
    let loss = tape.softmax_cross_entropy(h, labels.to_vec())?;
    Ok((loss, vars))
}

/// Trains the classifier with cross-entropy and Adam, early-stopping on a
/// held-out fraction, and returns it frozen at the best validation epoch.
///
/// Covariates are used as given (masked cells zeroed); callers standardize.
pub fn fit_propensity(data: &Dataset, config: &PropensityConfig, seed: u64) -> Result<PropensityModel> {
    config.validate()?;
    let treated = data.treated_count();
    if treated == 0 || treated == data.n() {
        return Err(Error::Unfittable(format!(
            "propensity needs both arms; {treated} of {} units are treated",
            data.n()
        )));
    }
    let d = data.d();
    let x = data.masked_x();
    let a = data.treatment();
    let (train_idx, val_idx) = if data.n() >= 20 {
        split_indices(data.n(), 1.0 - config.validation_fraction, mix64(seed ^ 0xA11CE))?
    } else {
        ((0..data.n()).collect(), (0..data.n()).collect())
    };
    let gather_x = |idx: &[usize]| -> Vec<f64> {
        idx.iter()
            .flat_map(|&i| x[i * d..(i + 1) * d].iter().copied())
            .collect()
    };
    let val_x = gather_x(&val_idx);
    let val_a: Vec<f64> = val_idx.iter().map(|&i| a[i]).collect();

    let mut rng = seeded_rng(seed);
    let mut dims = vec![d];
    dims.extend(&config.hidden);
    dims.push(2);
    let mut params = MlpParams::init(&dims, Activation::Relu, Activation::Softmax, &mut rng)?;
    // Zero head: training starts from π̂ = 0.5 everywhere, so covariate
    // dependence only appears when the data support it.
    let head = params.layers.last_mut().expect("at least one layer");
    head.weight = Tensor::zeros(head.weight.shape());
    let mut model = PropensityModel::new(params, config.clip)?;
    let mut adam = Adam::for_params(config.learning_rate, &model.params.parameters());

    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut order = train_idx.clone();
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let bx = gather_x(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| a[i] as usize).collect();
            let mut tape = Tape::new();
            let (loss, vars) = batch_loss(&model.params, &bx, d, &labels, &mut tape)?;
            let grads = tape.backward(loss)?;
            let mut g: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
            if config.weight_decay > 0.0 {
                for (k, layer) in model.params.layers.iter().enumerate() {
                    g[2 * k] = g[2 * k].zip_map(&layer.weight, |gi, wi| gi + config.weight_decay * wi)?;
                }
            }
            adam.step(&mut model.params.parameters_mut(), &g)?;
        }
        let val = binary_log_loss(&model.raw_probabilities(&val_x)?, &val_a);
        if val < best.0 {
            best = (val, epoch, model.params.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }
    model.params = best.2;

    let pi = model.raw_probabilities(&x)?;
    let clipped = pi
        .iter()
        .filter(|&&p| p <= config.clip || p >= 1.0 - config.clip)
        .count();
    let clipped_fraction = clipped as f64 / pi.len() as f64;
    if clipped > 0 {
        log::warn!(
            "propensity estimates clipped to [{}, {}] for {clipped} of {} units; overlap may be violated",
            config.clip,
            1.0 - config.clip,
            pi.len()
        );
    }
    model.report = Some(PropensityReport {
        epochs_run,
        best_epoch: best.1,
        validation_log_loss: model.log_loss(&val_x, &val_a)?,
        clipped_fraction,
    });
    Ok(model)
}
