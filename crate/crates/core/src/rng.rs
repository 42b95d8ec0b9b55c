//! Seeded randomness shared by every module.
//!
//! All random draws in the toolkit go through [`SeededRng`] so that plans,
//! initializations, dropout masks and synthetic data are reproducible from a
//! single 64-bit seed, and reproducible by other implementations. The full
//! algorithm chain is:
//!
//! * **Seed expansion.** A 64-bit seed (optionally mixed with 64-bit stream
//!   tags, see [`SeededRng::derive`]) is expanded with SplitMix64
//!   (`z += 0x9E3779B97F4A7C15; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
//!   z = (z ^ z>>27) * 0x94D049BB133111EB; z ^ z>>31`). Four successive
//!   outputs `a, b, c, d` form `state = a<<64 | b` and `stream = c<<64 | d`.
//! * **Generator.** PCG XSL RR 128/64 (`Lcg128Xsl64`, a.k.a. PCG64) created
//!   with `Pcg64::new(state, stream)`.
//! * **Uniform real.** `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! * **Uniform integer below n.** Lemire's widening multiply with rejection:
//!   `m = x * n` as 128-bit; reject while `low64(m) < (2^64 - n) mod n`;
//!   return `high64(m)`.
//! * **Normal.** Box-Muller, one output per pair of uniforms:
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`.
//! * **Shuffle.** Fisher-Yates from the back: for `i` in `(1..n).rev()`,
//!   swap `i` with `below(i + 1)`.

use rand_core::RngCore;
use rand_pcg::Pcg64;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator; see the module docs for the exact algorithm.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: Pcg64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, &[])
    }

    /// Independent stream for `(seed, tags...)`. Tags are folded into the
    /// SplitMix64 state one at a time: `s = splitmix(s) ^ tag`.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let mut s = seed;
        for &tag in tags {
            s = splitmix64(&mut s) ^ tag;
        }
        let a = splitmix64(&mut s) as u128;
        let b = splitmix64(&mut s) as u128;
        let c = splitmix64(&mut s) as u128;
        let d = splitmix64(&mut s) as u128;
        Self {
            inner: Pcg64::new((a << 64) | b, (c << 64) | d),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Uniform integer in the closed range `[lo, hi]`.
    pub fn between(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of SplitMix64 seeded with 0.
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(&mut s), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::derive(42, &[1]);
        let mut d = SeededRng::derive(42, &[2]);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn below_stays_in_range_and_covers() {
        let mut rng = SeededRng::new(7);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            let v = rng.below(7) as usize;
            seen[v] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800 && c < 1200), "{seen:?}");
    }

    #[test]
    fn uniform_and_normal_moments() {
        let mut rng = SeededRng::new(3);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            let z = rng.normal();
            s += z;
            s2 += z * z;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = SeededRng::new(11);
        let mut v: Vec<u32> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
