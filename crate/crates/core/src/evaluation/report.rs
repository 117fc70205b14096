use serde::{Deserialize, Serialize};

use crate::data::{DataScaler, Dataset, Oracle};
use crate::error::{Error, Result};
use crate::evaluation::metrics::{coverage, po_rmse, predictive_interval, wasserstein_1d_seeded};
use crate::evaluation::samples::{cate_and_pehe, PosteriorSamples};
use crate::numcore::rng::mix64;
use crate::numcore::{stream_rng, RngExt};
use crate::training::TrainedModel;

const REFERENCE_STREAM: u64 = 0x0EF5;
const RESAMPLE_STREAM: u64 = 0x2E5A;

/// How per-unit sample sets are aggregated into one Wasserstein distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WassersteinMode {
    /// Distance per unit, then the mean over units.
    #[default]
    PerUnit,
    /// One distance between the pooled samples of all units.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Samples per unit and arm.
    pub m: usize,
    pub w_mode: WassersteinMode,
    /// In-sample metrics use at most this many training units (the first ones).
    pub max_in_sample_units: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            m: 100,
            w_mode: WassersteinMode::PerUnit,
            max_in_sample_units: None,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Configuration(format!(
                "m = {} (need at least 2 samples per unit)",
                self.m
            )));
        }
        if self.max_in_sample_units == Some(0) {
            return Err(Error::Configuration("max_in_sample_units must be positive".into()));
        }
        Ok(())
    }
}

/// Metrics of one arm on one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    /// In outcome standard deviations of the training split.
    pub w1: f64,
    /// Against the oracle conditional mean.
    pub rmse: f64,
    /// Against the realized potential outcome.
    pub coverage95: f64,
    pub coverage99: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub units: usize,
    pub arms: [ArmMetrics; 2],
    pub pehe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    pub n_train: usize,
    pub n_test: usize,
    pub m: usize,
    pub w_mode: WassersteinMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub in_sample: SplitMetrics,
    pub out_of_sample: SplitMetrics,
    pub meta: ReportMeta,
}

impl EvalReport {
    /// Pretty JSON with a trailing newline; byte-stable for equal reports.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

/// One row of the per-unit table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitRow {
    pub split: &'static str,
    pub unit: usize,
    pub arm: usize,
    pub w1: f64,
    /// `|mean of samples − μ_a(x)|`.
    pub rmse: f64,
    pub covered95: bool,
    pub covered99: bool,
}

pub const UNIT_COLUMNS: [&str; 7] = ["split", "unit", "arm", "w1", "rmse", "covered95", "covered99"];

/// `m` draws per unit from the oracle law `N(μ_a, sd_a)`, unit-major.
pub fn oracle_reference(oracle: &Oracle, arm: usize, m: usize, seed: u64) -> Vec<f64> {
    let (mu, sd) = (oracle.mean(arm), oracle.sd(arm));
    let base = mix64(seed ^ REFERENCE_STREAM);
    let mut out = Vec::with_capacity(mu.len() * m);
    for i in 0..mu.len() {
        let mut rng = stream_rng(base, (2 * i + arm) as u64);
        out.extend((0..m).map(|_| mu[i] + sd[i] * rng.normal()));
    }
    out
}

/// Per-unit distances and their aggregate. Both inputs are unit-major with
/// `m_a` and `m_b` values per unit; values are divided by `scale` first.
pub fn arm_wasserstein(
    a: &[f64],
    m_a: usize,
    b: &[f64],
    m_b: usize,
    scale: f64,
    mode: WassersteinMode,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    if m_a == 0
        || m_b == 0
        || !a.len().is_multiple_of(m_a)
        || !b.len().is_multiple_of(m_b)
        || a.len() / m_a != b.len() / m_b
    {
        return Err(Error::Dimension(format!(
            "{} values at {m_a} per unit vs {} at {m_b} per unit",
            a.len(),
            b.len()
        )));
    }
    if !(scale > 0.0) {
        return Err(Error::Parameter(format!("outcome scale {scale} must be positive")));
    }
    let za: Vec<f64> = a.iter().map(|v| v / scale).collect();
    let zb: Vec<f64> = b.iter().map(|v| v / scale).collect();
    let base = mix64(seed ^ RESAMPLE_STREAM);
    let per_unit: Vec<f64> = za
        .chunks(m_a)
        .zip(zb.chunks(m_b))
        .enumerate()
        .map(|(i, (x, y))| wasserstein_1d_seeded(x, y, 1.0, mix64(base ^ i as u64)))
        .collect::<Result<_>>()?;
    let aggregate = match mode {
        WassersteinMode::PerUnit => per_unit.iter().sum::<f64>() / per_unit.len().max(1) as f64,
        WassersteinMode::Pooled => wasserstein_1d_seeded(&za, &zb, 1.0, base)?,
    };
    Ok((per_unit, aggregate))
}

/// Metrics of one split given its posterior samples and oracle.
pub fn evaluate_samples(
    samples: &PosteriorSamples,
    oracle: &Oracle,
    outcome_scale: f64,
    config: &EvalConfig,
    split: &'static str,
) -> Result<(SplitMetrics, Vec<UnitRow>)> {
    let n = samples.units;
    if oracle.len() != n {
        return Err(Error::Dimension(format!(
            "{} oracle units for {n} sampled units",
            oracle.len()
        )));
    }
    let mut rows = Vec::with_capacity(2 * n);
    let mut arms = Vec::with_capacity(2);
    for arm in 0..2 {
        let reference = oracle_reference(oracle, arm, config.m, config.seed);
        let (w_unit, w1) = arm_wasserstein(
            samples.arm(arm),
            samples.m,
            &reference,
            config.m,
            outcome_scale,
            config.w_mode,
            config.seed ^ arm as u64,
        )?;
        let means = samples.means(arm);
        let mut pi95 = Vec::with_capacity(n);
        let mut pi99 = Vec::with_capacity(n);
        for i in 0..n {
            pi95.push(predictive_interval(samples.unit(i, arm), 0.05)?);
            pi99.push(predictive_interval(samples.unit(i, arm), 0.01)?);
        }
        let truth = oracle.potential(arm);
        let inside = |(lo, hi): (f64, f64), y: f64| lo <= y && y <= hi;
        for i in 0..n {
            rows.push(UnitRow {
                split,
                unit: i,
                arm,
                w1: w_unit[i],
                rmse: (means[i] - oracle.mean(arm)[i]).abs(),
                covered95: inside(pi95[i], truth[i]),
                covered99: inside(pi99[i], truth[i]),
            });
        }
        arms.push(ArmMetrics {
            w1,
            rmse: po_rmse(&means, oracle.mean(arm))?,
            coverage95: coverage(&pi95, truth)?,
            coverage99: coverage(&pi99, truth)?,
        });
    }
    let (_, pehe) = cate_and_pehe(samples, &oracle.true_cate)?;
    let metrics = SplitMetrics {
        units: n,
        arms: [arms[0], arms[1]],
        pehe,
    };
    Ok((metrics, rows))
}

/// Full evaluation of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub rows: Vec<UnitRow>,
}

impl Evaluation {
    /// Per-unit table as CSV text.
    pub fn rows_csv(&self) -> String {
        let mut s = UNIT_COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:?},{:?},{},{}\n",
                r.split, r.unit, r.arm, r.w1, r.rmse, r.covered95 as u8, r.covered99 as u8
            ));
        }
        s
    }
}

/// The training units scored in-sample: all of them, or the first
/// `max_in_sample_units`.
pub fn in_sample_subset(train: &Dataset, config: &EvalConfig) -> Dataset {
    match config.max_in_sample_units {
        Some(k) if k < train.n() => train.select(&(0..k).collect::<Vec<_>>()),
        _ => train.clone(),
    }
}

/// Samples both arms on the (capped) training split and the test split and
/// scores them against the oracle. W1 is reported in units of the training
/// outcome standard deviation.
pub fn evaluate_model(
    model: &TrainedModel,
    train: &Dataset,
    test: &Dataset,
    config: &EvalConfig,
    config_hash: &str,
) -> Result<Evaluation> {
    config.validate()?;
    let scale = DataScaler::fit(train).outcome_scale();
    let in_data = in_sample_subset(train, config);
    let mut rows = Vec::new();
    let mut score = |data: &Dataset, split: &'static str, seed: u64| -> Result<SplitMetrics> {
        let oracle = data.require_oracle()?;
        let samples = PosteriorSamples::draw(model, data, config.m, seed)?;
        let (metrics, r) = evaluate_samples(&samples, oracle, scale, config, split)?;
        rows.extend(r);
        Ok(metrics)
    };
    let in_sample = score(&in_data, "in", mix64(config.seed ^ 1))?;
    let out_of_sample = score(test, "out", mix64(config.seed ^ 2))?;
    let report = EvalReport {
        in_sample,
        out_of_sample,
        meta: ReportMeta {
            seed: config.seed,
            config_hash: config_hash.to_string(),
            n_train: train.n(),
            n_test: test.n(),
            m: config.m,
            w_mode: config.w_mode,
        },
    };
    Ok(Evaluation { report, rows })
}

/// Point predictions repeated `m` times per unit, so a deterministic
/// predictor can be scored with the distributional metric.
pub fn point_mass_samples(predictions: &[f64], m: usize) -> Vec<f64> {
    predictions.iter().flat_map(|&p| std::iter::repeat_n(p, m)).collect()
}

/// Metrics of a point predictor on one arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointArmMetrics {
    /// Point mass against the oracle law, same units and reference draws as
    /// [`ArmMetrics::w1`].
    pub w1: f64,
    pub rmse: f64,
}

/// Scores `[μ̂_0, μ̂_1]` against the oracle of the same units.
pub fn score_point_predictions(
    predictions: &[Vec<f64>; 2],
    oracle: &Oracle,
    outcome_scale: f64,
    config: &EvalConfig,
) -> Result<[PointArmMetrics; 2]> {
    let mut out = [PointArmMetrics { w1: 0.0, rmse: 0.0 }; 2];
    for (arm, slot) in out.iter_mut().enumerate() {
        let reference = oracle_reference(oracle, arm, config.m, config.seed);
        let (_, w1) = arm_wasserstein(
            &point_mass_samples(&predictions[arm], config.m),
            config.m,
            &reference,
            config.m,
            outcome_scale,
            config.w_mode,
            config.seed ^ arm as u64,
        )?;
        *slot = PointArmMetrics {
            w1,
            rmse: po_rmse(&predictions[arm], oracle.mean(arm))?,
        };
    }
    Ok(out)
}
