use rand::seq::IndexedRandom;

use crate::error::{Error, Result};
use crate::numcore::seeded_rng;

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Empirical order-`k` Wasserstein distance between two samples.
///
/// Unequal sizes are matched by resampling the larger set down to the smaller
/// size with replacement, seeded by `seed`.
pub fn wasserstein_1d_seeded(a: &[f64], b: &[f64], k: f64, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Parameter("Wasserstein distance of an empty sample".into()));
    }
    if !(k >= 1.0) {
        return Err(Error::Parameter(format!("order k={k} must be at least 1")));
    }
    let (mut xs, mut ys) = (sorted(a), sorted(b));
    if xs.len() != ys.len() {
        let n = xs.len().min(ys.len());
        let mut rng = seeded_rng(seed);
        let shrink = |v: &[f64], rng: &mut _| -> Vec<f64> {
            sorted(&(0..n).map(|_| *v.choose(rng).expect("nonempty")).collect::<Vec<_>>())
        };
        if xs.len() > n {
            xs = shrink(&xs, &mut rng);
        } else {
            ys = shrink(&ys, &mut rng);
        }
    }
    let n = xs.len() as f64;
    let total: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y).abs().powf(k)).sum();
    Ok((total / n).powf(1.0 / k))
}

/// [`wasserstein_1d_seeded`] with seed 0.
pub fn wasserstein_1d(a: &[f64], b: &[f64], k: f64) -> Result<f64> {
    wasserstein_1d_seeded(a, b, k, 0)
}

/// Linear-interpolation quantile of sorted data: position `q·(n − 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Equal-tailed `(1 − alpha)` interval: the `alpha/2` and `1 − alpha/2`
/// linear-interpolation quantiles.
pub fn predictive_interval(samples: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Parameter("predictive interval of an empty sample".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha {alpha} outside (0, 1)")));
    }
    let s = sorted(samples);
    Ok((quantile_sorted(&s, alpha / 2.0), quantile_sorted(&s, 1.0 - alpha / 2.0)))
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: {a} vs {b} entries")));
    }
    if a == 0 {
        return Err(Error::Parameter(format!("{what}: empty input")));
    }
    Ok(())
}

/// Fraction of truths inside their interval (bounds inclusive).
pub fn coverage(intervals: &[(f64, f64)], truths: &[f64]) -> Result<f64> {
    check_lengths(intervals.len(), truths.len(), "coverage")?;
    let hits = intervals
        .iter()
        .zip(truths)
        .filter(|((lo, hi), y)| lo <= *y && *y <= hi)
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

pub fn po_rmse(predicted: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(predicted.len(), truths.len(), "po_rmse")?;
    Ok(rmse(predicted, truths))
}

pub fn pehe(tau_hat: &[f64], tau: &[f64]) -> Result<f64> {
    check_lengths(tau_hat.len(), tau.len(), "pehe")?;
    Ok(rmse(tau_hat, tau))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_endpoints() {
        let s = [1.0, 2.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
        assert_eq!(quantile_sorted(&s, 0.75), 3.0);
    }

    #[test]
    fn unequal_sizes_are_resampled_deterministically() {
        let a: Vec<f64> = (0..50).map(f64::from).collect();
        let b: Vec<f64> = (0..20).map(f64::from).collect();
        let w1 = wasserstein_1d_seeded(&a, &b, 1.0, 4).unwrap();
        assert_eq!(w1, wasserstein_1d_seeded(&a, &b, 1.0, 4).unwrap());
        assert!(w1 > 0.0);
    }

    #[test]
    fn order_two() {
        assert!((wasserstein_1d(&[0.0, 0.0], &[3.0, 4.0], 2.0).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
    }
}
