use serde::{Deserialize, Serialize};

use crate::denoiser::Conditioning;
use crate::diffusion::process::{
    forward_sample, gaussian_kl, gaussian_log_density, posterior_mean, reverse_mean_unchecked,
};
use crate::diffusion::sampler::NoisePredictor;
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numcore::RngExt;

/// Per-unit averages of the three evidence-lower-bound components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `E_q[log p(y_0 | y_1)]`.
    pub reconstruction: f64,
    /// `KL(q(y_T | y_0) ‖ N(0, 1))`.
    pub prior_matching: f64,
    /// `Σ_{t≥2} E_q[KL(q(y_{t-1} | y_t, y_0) ‖ p(y_{t-1} | y_t))]`.
    pub denoising_matching: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        self.reconstruction - self.prior_matching - self.denoising_matching
    }
}

/// Closed-form prior-matching KL for one outcome value.
pub fn prior_matching(schedule: &NoiseSchedule, y0: f64) -> f64 {
    let ab = schedule.alpha_bar(schedule.steps());
    gaussian_kl(ab.sqrt() * y0, 1.0 - ab, 0.0, 1.0)
}

/// `KL(q(y_{t-1} | y_t, y_0) ‖ N(μ_θ, σ_t²))` at a single step `t ≥ 2`.
pub fn denoising_kl(schedule: &NoiseSchedule, y_t: f64, y0: f64, t: usize, predicted_noise: f64) -> Result<f64> {
    if t < 2 {
        return Err(Error::Parameter(format!("denoising term needs t >= 2, got {t}")));
    }
    let mu_q = posterior_mean(schedule, y_t, y0, t)?;
    let mu_theta = reverse_mean_unchecked(schedule, y_t, t, predicted_noise);
    let s = schedule.sigma(t);
    Ok(gaussian_kl(mu_q, schedule.posterior_variance(t), mu_theta, s * s))
}

/// Monte-Carlo estimate of the ELBO components, averaged over the rows of
/// `cond` (one outcome per row in `y0`) and `n_mc` forward draws per step.
pub fn elbo_terms<P, R>(
    schedule: &NoiseSchedule,
    predictor: &P,
    y0: &[f64],
    cond: &Conditioning,
    rng: &mut R,
    n_mc: usize,
) -> Result<ElboTerms>
where
    P: NoisePredictor + ?Sized,
    R: rand::Rng + ?Sized,
{
    if n_mc == 0 {
        return Err(Error::Parameter("n_mc must be at least 1".into()));
    }
    if y0.len() != cond.rows() || y0.is_empty() {
        return Err(Error::Dimension(format!(
            "{} outcomes for {} conditioning rows",
            y0.len(),
            cond.rows()
        )));
    }
    if predictor.num_steps() != schedule.steps() {
        return Err(Error::Configuration(format!(
            "denoiser was built for T={} but the schedule has T={}",
            predictor.num_steps(),
            schedule.steps()
        )));
    }
    let batch = cond.repeat_rows(n_mc);
    let prepared = predictor.prepare(&batch)?;
    let targets: Vec<f64> = y0.iter().flat_map(|&v| std::iter::repeat_n(v, n_mc)).collect();
    let rows = targets.len();

    let draw = |rng: &mut R, t: usize| -> Result<Vec<f64>> {
        targets
            .iter()
            .map(|&v| forward_sample(schedule, v, t, rng.normal()))
            .collect()
    };

    let y1 = draw(rng, 1)?;
    let eps = predictor.predict(&prepared, &y1, 1)?;
    let s1 = schedule.sigma(1);
    let reconstruction = (0..rows)
        .map(|i| {
            let mean = reverse_mean_unchecked(schedule, y1[i], 1, eps[i]);
            gaussian_log_density(targets[i], mean, s1 * s1)
        })
        .sum::<f64>()
        / rows as f64;

    let mut denoising = 0.0;
    for t in 2..=schedule.steps() {
        let y_t = draw(rng, t)?;
        let eps = predictor.predict(&prepared, &y_t, t)?;
        for i in 0..rows {
            denoising += denoising_kl(schedule, y_t[i], targets[i], t, eps[i])?;
        }
    }
    let prior = y0.iter().map(|&v| prior_matching(schedule, v)).sum::<f64>() / y0.len() as f64;

    Ok(ElboTerms {
        reconstruction,
        prior_matching: prior,
        denoising_matching: denoising / rows as f64,
    })
}
