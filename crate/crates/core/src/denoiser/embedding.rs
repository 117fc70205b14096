use crate::error::{Error, Result};

/// Sinusoidal step embedding: interleaved `(sin(t·ω_k), cos(t·ω_k))` pairs
/// with `ω_k = 10000^(-k / (dim/2))`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let t = t as f64;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let (s, c) = (t * freq).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}
