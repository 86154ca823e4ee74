//! Deterministic random number generation.
//!
//! Every run consumes randomness from a single [`RngState`] seeded with one
//! u64. The generator is ChaCha with 8 rounds keyed through `seed_from_u64`,
//! so an identical seed and an identical call sequence reproduce the exact
//! same stream on every platform. All derived quantities are defined on top
//! of the raw u64 stream:
//!
//! * uniform doubles take the top 53 bits of one u64,
//! * normal draws are Box-Muller pairs and always consume exactly two u64s,
//! * bounded indices use rejection sampling (no modulo bias),
//! * [`RngState::fork`] derives an independent child stream by hashing the
//!   parent seed with a label (FNV-1a, then SplitMix64). Forking never
//!   advances the parent, which is what lets optional pipeline stages draw
//!   randomness without desynchronising the stages around them.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            stream: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The seed this stream was created from (fork labels already folded in).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `label`. Does not advance `self`.
    pub fn fork(&self, label: &str) -> RngState {
        RngState::new(splitmix64(self.seed ^ fnv1a64(label.as_bytes())))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.stream.next_u64()
    }

    /// Uniform draw from [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Gaussian draw via Box-Muller. Consumes exactly two u64s.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1], keeps the log finite
        let u2 = self.uniform();
        mean + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in [0, n). Rejection sampled, so every value is exactly
    /// equally likely. Panics if n == 0.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() needs a non-empty range");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices drawn uniformly from [0, n), in draw order.
    /// Panics if k > n.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngState::new(7);
        let mut b = RngState::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn forks_are_independent_of_parent_position() {
        let parent = RngState::new(7);
        let mut advanced = parent.clone();
        for _ in 0..10 {
            advanced.next_u64();
        }
        let mut f1 = parent.fork("x");
        let mut f2 = advanced.fork("x");
        assert_eq!(f1.next_u64(), f2.next_u64());
        let mut other = parent.fork("y");
        assert_ne!(f1.next_u64(), other.next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = RngState::new(3);
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments_roughly_match() {
        let mut r = RngState::new(11);
        let n = 20000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal(2.0, 3.0)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.1, "mean {mean}");
        assert!((var - 9.0).abs() < 0.4, "var {var}");
    }

    #[test]
    fn index_is_unbiased_over_small_range() {
        let mut r = RngState::new(5);
        let mut counts = [0usize; 7];
        for _ in 0..70000 {
            counts[r.index(7)] += 1;
        }
        for &c in &counts {
            assert!((c as f64 - 10000.0).abs() < 500.0, "counts {counts:?}");
        }
    }

    #[test]
    fn choose_distinct_yields_distinct() {
        let mut r = RngState::new(9);
        let picks = r.choose_distinct(50, 20);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
        assert!(picks.iter().all(|&i| i < 50));
    }
}
