//! Deterministic random streams.
//!
//! All randomness in the crate flows through ChaCha8, a fixed counter-based
//! generator with 2^64 independent streams. A (seed, stream) pair fully
//! determines a sequence, so datasets and training runs are reproducible
//! across runs and platforms.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-known stream ids so independent consumers never collide.
pub mod streams {
    pub const STRUCTURE: u64 = 0x01;
    pub const BOUNDARY: u64 = 0x02;
    pub const NET_INIT: u64 = 0x03;
    pub const SHUFFLE: u64 = 0x04;
    pub const BAYES_NOISE: u64 = 0x05;
    pub const PREDICTIVE: u64 = 0x06;
}

/// A seeded ChaCha8 stream. `stream` selects one of 2^64 disjoint substreams.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Substream keyed by two indices (e.g. structure index within a dataset).
pub fn keyed_rng(seed: u64, stream: u64, key: u64) -> ChaCha8Rng {
    // Mix the key into the stream id; splitmix64 keeps distinct keys disjoint.
    let mixed = splitmix64(stream.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(key));
    stream_rng(seed, mixed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Uniform draw in `[lo, hi)` (or exactly `lo` when the range is collapsed).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Standard normal via Box-Muller; two uniforms per pair of draws.
pub struct NormalSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalSource {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng, spare: None }
    }

    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1: f64 = 1.0 - self.rng.random::<f64>();
        let u2: f64 = self.rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next();
        }
    }
}

/// Deterministic Fisher-Yates shuffle of indices 0..n.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream_rng(42, 7);
        let mut b = stream_rng(42, 7);
        for _ in 0..100 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn streams_are_disjoint() {
        let mut a = stream_rng(42, 1);
        let mut b = stream_rng(42, 2);
        let same = (0..64).filter(|_| a.random::<u64>() == b.random::<u64>()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn normal_moments() {
        let mut src = NormalSource::new(stream_rng(3, 1));
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = src.next();
            s += z;
            s2 += z * z;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
