//! Counter-based deterministic RNG streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a
//! tuple of integers (global seed, scene index, stream id, ...). Streams
//! are independent, so scene generation and augmentation can run in
//! parallel while staying bit-reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mix a key tuple into a single 64-bit seed (FNV-1a over the parts,
/// finished with a splitmix64 scramble).
pub fn mix_key(parts: &[u64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for part in parts {
        for byte in part.to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    // splitmix64 finalizer
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// A deterministic stream for the given key tuple.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_key(parts))
}

/// Sampling helpers layered over any `Rng`.
pub trait RngSampling: Rng {
    /// Uniform draw from the closed interval `[lo, hi]`; degenerate
    /// intervals return `lo` exactly.
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.gen::<f64>()
    }

    /// Standard Box-Muller normal draw.
    fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let u1: f64 = self.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = self.gen::<f64>();
        mean + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Poisson draw via Knuth's product method, chunked so the running
    /// product never underflows for large rates.
    fn poisson(&mut self, lambda: f64) -> u64 {
        if lambda <= 0.0 {
            return 0;
        }
        let mut remaining = lambda;
        let mut total = 0u64;
        while remaining > 0.0 {
            let chunk = remaining.min(500.0);
            let limit = (-chunk).exp();
            let mut product = self.gen::<f64>();
            let mut count = 0u64;
            while product > limit {
                product *= self.gen::<f64>();
                count += 1;
            }
            total += count;
            remaining -= chunk;
        }
        total
    }
}

impl<T: Rng> RngSampling for T {}
