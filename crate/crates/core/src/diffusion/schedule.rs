use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    /// Linear interpolation in `sqrt(beta)` space.
    Quadratic,
}

/// Reverse-process standard deviation per step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    /// `sigma_t = sqrt(beta_t)`.
    #[default]
    Beta,
    /// `sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)`, with step 1
    /// borrowing step 2's value so it stays positive.
    Posterior,
}

/// Serializable description of a schedule; [`NoiseSchedule`] holds the tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
    pub sigma: SigmaKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.5,
            kind: ScheduleKind::Quadratic,
            sigma: SigmaKind::Beta,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::with_sigma(self.steps, self.beta_start, self.beta_end, self.kind, self.sigma)
    }
}

/// Per-step tables for a `T`-step diffusion. Step `t` lives at index `t - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Builds a schedule with `sigma_t = sqrt(beta_t)`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::with_sigma(steps, beta_start, beta_end, kind, SigmaKind::Beta)
}

impl NoiseSchedule {
    pub fn with_sigma(
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        kind: ScheduleKind,
        sigma_kind: SigmaKind,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let frac = |t: usize| {
            if steps == 1 {
                0.0
            } else {
                t as f64 / (steps - 1) as f64
            }
        };
        let mut beta: Vec<f64> = (0..steps)
            .map(|t| match kind {
                ScheduleKind::Linear => beta_start + frac(t) * (beta_end - beta_start),
                ScheduleKind::Quadratic => {
                    let (s, e) = (beta_start.sqrt(), beta_end.sqrt());
                    (s + frac(t) * (e - s)).powi(2)
                }
            })
            .collect();
        // Pin the endpoints; rounding in sqrt/square can perturb the last bit.
        beta[0] = beta_start;
        if steps > 1 {
            beta[steps - 1] = beta_end;
        }
        let config = ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            kind,
            sigma: sigma_kind,
        };
        Ok(Self::from_parts(config, beta))
    }

    /// Schedule from an explicit beta table. The stored config records the
    /// endpoints only, so [`ScheduleConfig::build`] does not reproduce it.
    pub fn from_betas(beta: Vec<f64>, sigma_kind: SigmaKind) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Parameter(format!("beta {b} outside (0, 1)")));
        }
        let config = ScheduleConfig {
            steps: beta.len(),
            beta_start: beta[0],
            beta_end: beta[beta.len() - 1],
            kind: ScheduleKind::Linear,
            sigma: sigma_kind,
        };
        Ok(Self::from_parts(config, beta))
    }

    fn from_parts(config: ScheduleConfig, beta: Vec<f64>) -> Self {
        let steps = beta.len();
        let sigma_kind = config.sigma;
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = match sigma_kind {
            SigmaKind::Beta => beta.iter().map(|b| b.sqrt()).collect(),
            SigmaKind::Posterior => {
                let var = |i: usize| {
                    let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                    beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
                };
                (0..steps)
                    .map(|i| {
                        if i == 0 && steps > 1 {
                            var(1).sqrt()
                        } else if i == 0 {
                            beta[0].sqrt()
                        } else {
                            var(i).sqrt()
                        }
                    })
                    .collect()
            }
        };
        Self {
            config,
            beta,
            alpha,
            alpha_bar,
            sigma,
        }
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Parameter(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Variance of the forward posterior `q(y_{t-1} | y_t, y_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}
