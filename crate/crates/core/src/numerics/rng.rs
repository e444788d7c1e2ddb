//! Counter-based splittable RNG.
//!
//! Every stream is a pure function of a 64-bit key and a 64-bit counter, so
//! a stream can be split into independent child streams (`derive`, `split`)
//! without sharing mutable state. This is what makes sample generation
//! reproducible under any parallel schedule: worker i derives its own stream
//! from (seed, i) and nothing depends on interleaving.

/// SplitMix64 finalizer: a bijective avalanche mix on 64 bits.
#[inline]
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Deterministic counter-based generator. `Clone` copies the full stream
/// state; use [`Rng::derive`] to get an *independent* stream instead.
#[derive(Clone, Debug)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix(seed ^ GOLDEN),
            counter: 0,
        }
    }

    /// Child stream at `index`. Streams derived at different indices (or from
    /// different parents) are decorrelated; deriving never advances `self`.
    pub fn derive(&self, index: u64) -> Rng {
        Rng {
            key: mix(self.key ^ mix(index.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    /// `k` independent child streams (convenience over [`Rng::derive`]).
    pub fn split(&self, k: usize) -> Vec<Rng> {
        (0..k as u64).map(|i| self.derive(i)).collect()
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key ^ self.counter.wrapping_mul(GOLDEN));
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform f64 in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Rejection-sampled, so it is exactly uniform.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        let n = n as u64;
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < limit {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller (cosine branch only, so consumption is
    /// a fixed two draws per sample).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]: keeps ln finite
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Sample an index proportionally to non-negative `weights` (need not be
    /// normalized). Falls back to the last positive weight on fp overshoot.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(
            total > 0.0 && total.is_finite(),
            "categorical needs positive finite total weight, got {total}"
        );
        let mut target = self.uniform() * total;
        let mut last_positive = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                last_positive = i;
                if target < w {
                    return i;
                }
                target -= w;
            }
        }
        last_positive
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Uniformly random permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derive_gives_distinct_streams_and_leaves_parent_untouched() {
        let parent = Rng::new(7);
        let mut c0 = parent.derive(0);
        let mut c1 = parent.derive(1);
        let first: Vec<u64> = (0..8).map(|_| c0.next_u64()).collect();
        let second: Vec<u64> = (0..8).map(|_| c1.next_u64()).collect();
        assert_ne!(first, second);
        // Same derivation again reproduces the same stream.
        let mut c0b = parent.derive(0);
        let again: Vec<u64> = (0..8).map(|_| c0b.next_u64()).collect();
        assert_eq!(first, again);
    }

    #[test]
    fn split_matches_derive() {
        let parent = Rng::new(3);
        let mut kids = parent.split(4);
        for (i, kid) in kids.iter_mut().enumerate() {
            let mut direct = parent.derive(i as u64);
            assert_eq!(kid.next_u64(), direct.next_u64());
        }
    }

    #[test]
    fn uniform_is_flat_over_bins() {
        // Chi-square over 16 bins; df = 15, p = 0.001 critical value = 37.70.
        let mut rng = Rng::new(2024);
        let n = 1 << 16;
        let mut counts = [0usize; 16];
        for _ in 0..n {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            counts[(u * 16.0) as usize] += 1;
        }
        let expected = n as f64 / 16.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 37.70, "chi2 = {chi2}");
    }

    #[test]
    fn normal_moments_are_right() {
        let mut rng = Rng::new(11);
        let n = 200_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean = {mean}");
        assert!((var - 1.0).abs() < 0.03, "var = {var}");
    }

    #[test]
    fn below_stays_in_range_and_covers() {
        let mut rng = Rng::new(5);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[rng.below(7)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn categorical_tracks_weights() {
        let mut rng = Rng::new(9);
        let weights = [1.0, 0.0, 3.0];
        let mut counts = [0usize; 3];
        let n = 40_000;
        for _ in 0..n {
            counts[rng.categorical(&weights)] += 1;
        }
        assert_eq!(counts[1], 0);
        let frac2 = counts[2] as f64 / n as f64;
        assert!((frac2 - 0.75).abs() < 0.02, "frac2 = {frac2}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(1);
        let mut xs: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn permutation_varies_with_seed() {
        let a = Rng::new(1).permutation(20);
        let b = Rng::new(2).permutation(20);
        assert_ne!(a, b);
    }
}
