use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Deterministic, portable random stream used throughout the crate.
pub type DetRng = ChaCha8Rng;

/// Same seed, same stream, on every platform.
pub fn seeded_rng(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream `stream` of `seed`, e.g. one per test unit.
pub fn stream_rng(seed: u64, stream: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Convenience draws on any [`Rng`].
pub trait RngExt: Rng {
    fn normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }

    fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

impl<R: Rng + ?Sized> RngExt for R {}

/// Stateless 64-bit mixer (SplitMix64 finalizer).
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
