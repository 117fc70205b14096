use crate::denoiser::Conditioning;
use crate::diffusion::process::reverse_mean_unchecked;
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numcore::{stream_rng, RngExt};
use crate::parallel::par_map;

/// Anything that predicts the forward noise from `(y_t, t)` under a fixed
/// conditioning. `Prepared` caches the step-independent part of the forward
/// pass for a batch of rows.
pub trait NoisePredictor {
    type Prepared;

    fn num_steps(&self) -> usize;

    fn prepare(&self, cond: &Conditioning) -> Result<Self::Prepared>;

    /// One prediction per prepared row, all at step `t`.
    fn predict(&self, prepared: &Self::Prepared, y_t: &[f64], t: usize) -> Result<Vec<f64>>;
}

fn check_steps<P: NoisePredictor + ?Sized>(schedule: &NoiseSchedule, predictor: &P) -> Result<()> {
    if predictor.num_steps() != schedule.steps() {
        return Err(Error::Configuration(format!(
            "denoiser was built for T={} but the schedule has T={}",
            predictor.num_steps(),
            schedule.steps()
        )));
    }
    Ok(())
}

/// Runs the reverse chain for `rows` prepared rows.
///
/// `noise` fills a buffer with one draw per row; it is called once for `y_T`
/// and once per step `t = T..2`. Step 1 adds no noise.
pub fn sample_with_noise<P, F>(
    schedule: &NoiseSchedule,
    predictor: &P,
    prepared: &P::Prepared,
    rows: usize,
    mut noise: F,
) -> Result<Vec<f64>>
where
    P: NoisePredictor + ?Sized,
    F: FnMut(&mut [f64]),
{
    check_steps(schedule, predictor)?;
    let mut y = vec![0.0; rows];
    noise(&mut y);
    let mut z = vec![0.0; rows];
    for t in (1..=schedule.steps()).rev() {
        let eps = predictor.predict(prepared, &y, t)?;
        if t > 1 {
            noise(&mut z);
        }
        let sigma = schedule.sigma(t);
        for i in 0..rows {
            let mean = reverse_mean_unchecked(schedule, y[i], t, eps[i]);
            y[i] = if t > 1 { mean + sigma * z[i] } else { mean };
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "reverse chain output (T={})",
            schedule.steps()
        )));
    }
    Ok(y)
}

/// One draw of `y_0` for a single conditioning row.
pub fn ancestral_sample<P, R>(schedule: &NoiseSchedule, predictor: &P, cond: &Conditioning, rng: &mut R) -> Result<f64>
where
    P: NoisePredictor + ?Sized,
    R: rand::Rng + ?Sized,
{
    if cond.rows() != 1 {
        return Err(Error::Dimension(format!(
            "ancestral_sample takes one row, got {}",
            cond.rows()
        )));
    }
    let prepared = predictor.prepare(cond)?;
    let out = sample_with_noise(schedule, predictor, &prepared, 1, |buf| {
        for v in buf.iter_mut() {
            *v = rng.normal();
        }
    })?;
    Ok(out[0])
}

/// Units sampled together per batch in [`sample_units`].
const UNITS_PER_CHUNK: usize = 32;

/// `per_unit` draws for every row of `cond`, returned unit-major
/// (`out[i * per_unit + j]`).
///
/// Unit `i` draws all of its noise from `stream_rng(seed, i)`, so results do
/// not depend on chunking or thread count, and two calls that differ only in
/// the treatment channel share their noise (common random numbers).
pub fn sample_units<P>(
    schedule: &NoiseSchedule,
    predictor: &P,
    cond: &Conditioning,
    per_unit: usize,
    seed: u64,
) -> Result<Vec<f64>>
where
    P: NoisePredictor + Sync + ?Sized,
{
    check_steps(schedule, predictor)?;
    if per_unit == 0 {
        return Err(Error::Parameter("need at least one sample per unit".into()));
    }
    let n = cond.rows();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(UNITS_PER_CHUNK)
        .map(|s| (s, (s + UNITS_PER_CHUNK).min(n)))
        .collect();
    let results = par_map(&chunks, |&(start, end)| -> Result<Vec<f64>> {
        let units: Vec<usize> = (start..end).collect();
        let batch = cond.select(&units).repeat_rows(per_unit);
        let prepared = predictor.prepare(&batch)?;
        let mut rngs: Vec<_> = units.iter().map(|&u| stream_rng(seed, u as u64)).collect();
        sample_with_noise(schedule, predictor, &prepared, batch.rows(), |buf| {
            for (k, rng) in rngs.iter_mut().enumerate() {
                for v in &mut buf[k * per_unit..(k + 1) * per_unit] {
                    *v = rng.normal();
                }
            }
        })
    });
    let mut out = Vec::with_capacity(n * per_unit);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}
