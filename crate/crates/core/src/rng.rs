//! Seedable counter-based random streams.
//!
//! Every simulation owns one ChaCha8 stream selected by `(seed, stream)`.
//! Gaussian variates are produced by Box-Muller from exactly two 64-bit
//! words each, so the stream position after a step depends only on the
//! number of variates the step requested.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type SimRng = ChaCha8Rng;

/// Build the generator for replica `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Serializable generator position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPosition {
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word offset, stored as a decimal string to survive JSON readers without 128-bit ints.
    pub word_pos: String,
}

impl RngPosition {
    pub fn capture(seed: u64, rng: &SimRng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<SimRng> {
        let pos: u128 = self.word_pos.parse().ok()?;
        let mut rng = stream_rng(self.seed, self.stream);
        rng.set_word_pos(pos);
        Some(rng)
    }
}

/// Uniform on (0, 1].
#[inline]
pub fn open_unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform on [0, 1).
#[inline]
pub fn unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Two independent standard normals.
#[inline]
pub fn normal_pair<R: RngCore + ?Sized>(rng: &mut R) -> (f64, f64) {
    let radius = (-2.0 * open_unit(rng).ln()).sqrt();
    let angle = std::f64::consts::TAU * unit(rng);
    let (s, c) = angle.sin_cos();
    (radius * c, radius * s)
}

/// Fill `out` with standard normals; an odd tail discards the spare variate.
pub fn fill_normals<R: RngCore + ?Sized>(rng: &mut R, out: &mut [f64]) {
    let mut chunks = out.chunks_exact_mut(2);
    for pair in &mut chunks {
        let (a, b) = normal_pair(rng);
        pair[0] = a;
        pair[1] = b;
    }
    if let [last] = chunks.into_remainder() {
        *last = normal_pair(rng).0;
    }
}

#[inline]
pub fn normal<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    normal_pair(rng).0
}

/// Exponential variate with the given mean.
#[inline]
pub fn exponential<R: RngCore + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    -mean * open_unit(rng).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_roundtrip_resumes_stream() {
        let mut rng = stream_rng(7, 3);
        let mut buf = [0.0; 5];
        fill_normals(&mut rng, &mut buf);
        let pos = RngPosition::capture(7, &rng);
        let mut resumed = pos.restore().unwrap();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }

    #[test]
    fn streams_differ() {
        let mut a = stream_rng(1, 0);
        let mut b = stream_rng(1, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn consumption_is_fixed_per_variate() {
        let mut rng = stream_rng(11, 0);
        let mut buf = [0.0; 6];
        fill_normals(&mut rng, &mut buf);
        // three pairs, two u64 each, two 32-bit words per u64
        assert_eq!(rng.get_word_pos(), 12);
    }

    #[test]
    fn normal_moments() {
        let mut rng = stream_rng(5, 0);
        let n = 200_000;
        let mut buf = vec![0.0; n];
        fill_normals(&mut rng, &mut buf);
        let mean = buf.iter().sum::<f64>() / n as f64;
        let var = buf.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 5.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.02);
    }
}
