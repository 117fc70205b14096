use crate::diffusion::schedule::NoiseSchedule;
use crate::error::Result;

/// Noisy value at step `t` together with the noise that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionStepSample {
    pub t: usize,
    pub y_t: f64,
    pub epsilon: f64,
}

/// Closed-form `y_t = sqrt(abar_t)·y_0 + sqrt(1 - abar_t)·ε`.
pub fn forward_sample(schedule: &NoiseSchedule, y0: f64, t: usize, epsilon: f64) -> Result<f64> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(ab.sqrt() * y0 + (1.0 - ab).sqrt() * epsilon)
}

pub fn forward_step_sample(schedule: &NoiseSchedule, y0: f64, t: usize, epsilon: f64) -> Result<DiffusionStepSample> {
    Ok(DiffusionStepSample {
        t,
        y_t: forward_sample(schedule, y0, t, epsilon)?,
        epsilon,
    })
}

/// One application of the single-step kernel `q(y_t | y_{t-1})`.
pub fn forward_kernel_step(schedule: &NoiseSchedule, y_prev: f64, t: usize, noise: f64) -> Result<f64> {
    schedule.check_step(t)?;
    let b = schedule.beta(t);
    Ok((1.0 - b).sqrt() * y_prev + b.sqrt() * noise)
}

/// Reverse-step mean from predicted noise:
/// `(y_t - beta_t / sqrt(1 - abar_t) · ε̂) / sqrt(alpha_t)`.
pub fn reverse_mean(schedule: &NoiseSchedule, y_t: f64, t: usize, predicted_noise: f64) -> Result<f64> {
    schedule.check_step(t)?;
    Ok(reverse_mean_unchecked(schedule, y_t, t, predicted_noise))
}

#[inline]
pub(crate) fn reverse_mean_unchecked(schedule: &NoiseSchedule, y_t: f64, t: usize, predicted_noise: f64) -> f64 {
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    (y_t - coef * predicted_noise) / schedule.alpha(t).sqrt()
}

/// Mean of the forward posterior `q(y_{t-1} | y_t, y_0)` for `t >= 2`.
pub fn posterior_mean(schedule: &NoiseSchedule, y_t: f64, y0: f64, t: usize) -> Result<f64> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let b = schedule.beta(t);
    Ok((ab_prev.sqrt() * b * y0 + schedule.alpha(t).sqrt() * (1.0 - ab_prev) * y_t) / (1.0 - ab))
}

/// `KL(N(m1, v1) ‖ N(m2, v2))` for scalar Gaussians.
pub fn gaussian_kl(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / v2 - 1.0)
}

pub fn gaussian_log_density(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{build_schedule, ScheduleKind, SigmaKind};

    fn default_schedule() -> NoiseSchedule {
        build_schedule(100, 1e-4, 0.5, ScheduleKind::Quadratic).unwrap()
    }

    #[test]
    fn zero_noise_scales_input() {
        let s = default_schedule();
        let y = forward_sample(&s, 2.0, 30, 0.0).unwrap();
        assert_eq!(y, s.alpha_bar(30).sqrt() * 2.0);
    }

    #[test]
    fn first_step_is_near_identity() {
        let s = default_schedule();
        let y = forward_sample(&s, 1.5, 1, 0.3).unwrap();
        assert!((y - 1.5).abs() < 0.01);
    }

    #[test]
    fn out_of_range_step() {
        let s = default_schedule();
        assert!(forward_sample(&s, 0.0, 0, 0.0).is_err());
        assert!(forward_sample(&s, 0.0, 101, 0.0).is_err());
        assert!(reverse_mean(&s, 0.0, 101, 0.0).is_err());
    }

    #[test]
    fn reverse_mean_zero_noise() {
        let s = default_schedule();
        let m = reverse_mean(&s, 0.8, 40, 0.0).unwrap();
        assert_eq!(m, 0.8 / s.alpha(40).sqrt());
    }

    #[test]
    fn reverse_mean_small_beta_limit() {
        let s = build_schedule(10, 1e-12, 1e-12, ScheduleKind::Linear).unwrap();
        let m = reverse_mean(&s, 0.8, 1, 0.5).unwrap();
        assert!((m - 0.8).abs() < 1e-5);
    }

    #[test]
    fn reverse_mean_hand_evaluated() {
        // Step 2 with alpha_2 = 0.99 and abar_2 = 0.9.
        let b1 = 1.0 - 0.9 / 0.99;
        let s = NoiseSchedule::from_betas(vec![b1, 0.01], SigmaKind::Beta).unwrap();
        assert!((s.alpha_bar(2) - 0.9).abs() < 1e-15);
        let m = reverse_mean(&s, 1.0, 2, 0.5).unwrap();
        let expected = (1.0 / 0.99f64.sqrt()) * (1.0 - 0.01 / 0.1f64.sqrt() * 0.5);
        assert!((m - expected).abs() < 1e-12);
        assert!((m - 0.98915).abs() < 1e-5);
    }

    #[test]
    fn reverse_mean_is_linear_in_noise() {
        let s = default_schedule();
        let f = |e: f64| reverse_mean(&s, 0.4, 57, e).unwrap();
        let (a, b, c) = (f(0.0), f(1.0), f(2.5));
        assert!(((c - a) - 2.5 * (b - a)).abs() < 1e-12);
    }

    #[test]
    fn identical_gaussians_have_zero_kl() {
        assert_eq!(gaussian_kl(0.3, 2.0, 0.3, 2.0), 0.0);
    }
}
