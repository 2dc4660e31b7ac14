//! Deterministic, splittable random source.
//!
//! Backed by ChaCha8, which is counter based: the full state is the 64-bit
//! seed plus the word position, so a stream can be checkpointed and resumed
//! exactly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// SplitMix64 finalizer, used to derive child seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Resume a stream at an exact position.
    pub fn from_parts(seed: u64, word_pos: u128) -> Self {
        let mut r = Self::new(seed);
        r.inner.set_word_pos(word_pos);
        r
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Child stream keyed by `label`; does not advance `self`.
    pub fn derive(&self, label: u64) -> Self {
        Self::new(mix64(self.seed ^ mix64(label.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }

    /// Child stream seeded from the next draw of `self`.
    pub fn split(&mut self) -> Self {
        let s = self.inner.next_u64();
        Self::new(mix64(s))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform in the open interval `(0, 1)`.
    pub fn open_uniform(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gumbel(&mut self) -> f64 {
        -(-self.open_uniform().ln()).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resume_from_parts_continues_the_stream() {
        let mut a = RngState::new(11);
        for _ in 0..37 {
            a.uniform();
        }
        let mut b = RngState::from_parts(a.seed(), a.word_pos());
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ_and_repeat() {
        let root = RngState::new(3);
        let mut x = root.derive(1);
        let mut y = root.derive(2);
        let mut x2 = root.derive(1);
        let xs: Vec<u64> = (0..4).map(|_| x.next_u64()).collect();
        let ys: Vec<u64> = (0..4).map(|_| y.next_u64()).collect();
        let xs2: Vec<u64> = (0..4).map(|_| x2.next_u64()).collect();
        assert_ne!(xs, ys);
        assert_eq!(xs, xs2);
    }
}
