use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::denoiser::{Conditioning, DenoiserModel};
use crate::diffusion::{forward_sample, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numcore::{RngExt, Tape, Tensor, Var};
use crate::propensity::{ipw, PerturbationPolicy, PropensityModel};

/// Per-sample diffusion step and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraws {
    pub steps: Vec<usize>,
    pub epsilon: Vec<f64>,
}

impl NoiseDraws {
    /// `t ~ Unif{1..T}` and `ε ~ N(0, 1)` for each of `n` samples.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, n: usize, steps: usize) -> Self {
        let mut t = Vec::with_capacity(n);
        let mut e = Vec::with_capacity(n);
        for _ in 0..n {
            t.push(rng.random_range(1..=steps));
            e.push(rng.normal());
        }
        Self { steps: t, epsilon: e }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Mean of per-sample values with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl LossEstimate {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::Parameter("need at least two values for an estimate".into()));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            n,
        })
    }

    /// `|a − b|` in units of the combined standard error.
    pub fn z_distance(&self, other: &LossEstimate) -> f64 {
        (self.mean - other.mean).abs() / self.std_error.hypot(other.std_error)
    }
}

/// `m_t · (ε − f(y_t, t | x, a))²` for one conditioning row.
pub fn diffusion_loss_term<P: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    predictor: &P,
    y0: f64,
    cond: &Conditioning,
    t: usize,
    epsilon: f64,
) -> Result<f64> {
    if cond.rows() != 1 {
        return Err(Error::Dimension(format!("expected one row, got {}", cond.rows())));
    }
    let y_t = forward_sample(schedule, y0, t, epsilon)?;
    let prepared = predictor.prepare(cond)?;
    let f = predictor.predict(&prepared, &[y_t], t)?[0];
    Ok(cond.target()[0] * (epsilon - f).powi(2))
}

/// Masked squared noise errors for every row, grouping rows by step so each
/// distinct `t` costs one batched prediction.
pub fn per_sample_terms<P: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    predictor: &P,
    y0: &[f64],
    cond: &Conditioning,
    draws: &NoiseDraws,
) -> Result<Vec<f64>> {
    let n = cond.rows();
    if y0.len() != n || draws.len() != n {
        return Err(Error::Dimension(format!(
            "{} outcomes and {} draws for {n} rows",
            y0.len(),
            draws.len()
        )));
    }
    let mut out = vec![0.0; n];
    let mut by_step: Vec<Vec<usize>> = vec![Vec::new(); schedule.steps() + 1];
    for (i, &t) in draws.steps.iter().enumerate() {
        schedule.check_step(t)?;
        by_step[t].push(i);
    }
    for (t, rows) in by_step.iter().enumerate().filter(|(_, r)| !r.is_empty()) {
        let sub = cond.select(rows);
        let y_t: Vec<f64> = rows
            .iter()
            .map(|&i| forward_sample(schedule, y0[i], t, draws.epsilon[i]))
            .collect::<Result<_>>()?;
        let f = predictor.predict(&predictor.prepare(&sub)?, &y_t, t)?;
        for (k, &i) in rows.iter().enumerate() {
            out[i] = cond.target()[i] * (draws.epsilon[i] - f[k]).powi(2);
        }
    }
    Ok(out)
}

/// Mean of `w_i · term_i` on fixed draws, with its standard error.
pub fn weighted_loss<P: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    predictor: &P,
    y0: &[f64],
    cond: &Conditioning,
    weights: &[f64],
    draws: &NoiseDraws,
) -> Result<LossEstimate> {
    if weights.len() != cond.rows() {
        return Err(Error::Dimension(format!(
            "{} weights for {} rows",
            weights.len(),
            cond.rows()
        )));
    }
    let terms = per_sample_terms(schedule, predictor, y0, cond, draws)?;
    let values: Vec<f64> = terms.iter().zip(weights).map(|(t, w)| t * w).collect();
    LossEstimate::from_values(&values)
}

/// Orthogonal loss on a batch: weights from the frozen propensity model (or
/// its perturbation), fresh `(t, ε)` per sample.
pub fn orthogonal_loss<P, R>(
    batch: &Dataset,
    schedule: &NoiseSchedule,
    predictor: &P,
    propensity: &PropensityModel,
    policy: &PerturbationPolicy,
    rng: &mut R,
) -> Result<f64>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    if batch.n() == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    let w = propensity.weights(&batch.masked_x(), batch.treatment(), policy)?;
    let draws = NoiseDraws::draw(rng, batch.n(), schedule.steps());
    let terms = per_sample_terms(schedule, predictor, batch.outcome(), &batch.conditioning()?, &draws)?;
    let loss = terms.iter().zip(&w).map(|(t, w)| t * w).sum::<f64>() / batch.n() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("orthogonal loss over {} samples", batch.n())));
    }
    Ok(loss)
}

/// Inverse-propensity estimate of the two-arm loss from the observational
/// sample, with propensities `pi` supplied directly.
pub fn ipw_loss_estimate<P, R>(
    schedule: &NoiseSchedule,
    predictor: &P,
    data: &Dataset,
    pi: &[f64],
    rng: &mut R,
) -> Result<LossEstimate>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    if pi.len() != data.n() {
        return Err(Error::Dimension(format!(
            "{} propensities for n={}",
            pi.len(),
            data.n()
        )));
    }
    let w: Vec<f64> = pi.iter().zip(data.treatment()).map(|(&p, &a)| ipw(p, a)).collect();
    let draws = NoiseDraws::draw(rng, data.n(), schedule.steps());
    weighted_loss(schedule, predictor, data.outcome(), &data.conditioning()?, &w, &draws)
}

/// The two-arm target loss computed with both potential outcomes of every
/// unit: per unit, the arm-0 term plus the arm-1 term.
pub fn target_loss<P, R>(schedule: &NoiseSchedule, predictor: &P, data: &Dataset, rng: &mut R) -> Result<LossEstimate>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let oracle = data.require_oracle()?;
    let cond = data.conditioning()?;
    let mut per_unit = vec![0.0; data.n()];
    for arm in 0..2 {
        let draws = NoiseDraws::draw(rng, data.n(), schedule.steps());
        let c = cond.with_treatment(arm as f64);
        let terms = per_sample_terms(schedule, predictor, oracle.potential(arm), &c, &draws)?;
        for (u, t) in per_unit.iter_mut().zip(terms) {
            *u += t;
        }
    }
    LossEstimate::from_values(&per_unit)
}

/// Differentiable `mean_i(row_weight_i · (ε_i − f_i)²)` where `row_weight`
/// already includes the target mask.
#[allow(clippy::too_many_arguments)]
pub fn tape_loss(
    tape: &mut Tape,
    model: &DenoiserModel,
    vars: &[Var],
    y0: &[f64],
    cond: &Conditioning,
    row_weights: &[f64],
    draws: &NoiseDraws,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let n = cond.rows();
    if row_weights.len() != n {
        return Err(Error::Dimension(format!("{} weights for {n} rows", row_weights.len())));
    }
    let y_t: Vec<f64> = (0..n)
        .map(|i| forward_sample(schedule, y0[i], draws.steps[i], draws.epsilon[i]))
        .collect::<Result<_>>()?;
    let f = model.forward_tape(tape, vars, &y_t, &draws.steps, cond)?;
    let eps = tape.constant(Tensor::new(vec![n, 1], draws.epsilon.clone())?);
    let diff = tape.sub(eps, f)?;
    let sq = tape.square(diff)?;
    let weighted = tape.scale_rows(sq, row_weights.to_vec())?;
    tape.mean(weighted)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(f64, usize);

    impl NoisePredictor for Fixed {
        type Prepared = ();
        fn num_steps(&self) -> usize {
            self.1
        }
        fn prepare(&self, _: &Conditioning) -> Result<()> {
            Ok(())
        }
        fn predict(&self, _: &(), y: &[f64], _: usize) -> Result<Vec<f64>> {
            Ok(vec![self.0; y.len()])
        }
    }

    fn schedule() -> NoiseSchedule {
        crate::diffusion::build_schedule(10, 1e-3, 0.2, crate::diffusion::ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn zero_predictor_gives_eps_squared() {
        let c = Conditioning::single(&[0.0], 1.0).unwrap();
        let v = diffusion_loss_term(&schedule(), &Fixed(0.0, 10), 0.4, &c, 3, 1.5).unwrap();
        assert!((v - 2.25).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictor_gives_zero() {
        let c = Conditioning::single(&[0.0], 0.0).unwrap();
        let v = diffusion_loss_term(&schedule(), &Fixed(-0.7, 10), 0.4, &c, 3, -0.7).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn zero_target_mask_gives_zero() {
        let masks = [crate::denoiser::CausalMasks::for_unit(&[true], false)];
        let c = Conditioning::new(&[0.0], &[1.0], &masks).unwrap();
        let v = diffusion_loss_term(&schedule(), &Fixed(3.0, 10), 0.4, &c, 3, -1.0).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn single_sample_weighted_arithmetic() {
        // term = (1.5 − 0.633975)² = 0.75, w = 4/3 → loss 1.0.
        let f = 1.5 - 0.75f64.sqrt();
        let c = Conditioning::single(&[0.0], 0.0).unwrap();
        let term = diffusion_loss_term(&schedule(), &Fixed(f, 10), 0.0, &c, 2, 1.5).unwrap();
        assert!((term - 0.75).abs() < 1e-12);
        assert!((ipw(0.25, 0.0) * term - 1.0).abs() < 1e-12);
    }
}
