//! Seeded random streams.
//!
//! All randomness flows through [`Prng`], a ChaCha8 stream cipher keyed by a
//! 64-bit seed. ChaCha is counter based, so a given seed yields the same
//! stream on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct Prng(ChaCha8Rng);

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream derived from this seed and a label.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    pub fn gaussian<T: Real>(&mut self) -> T {
        let z: f64 = self.0.sample(StandardNormal);
        T::lit(z)
    }

    pub fn gaussian_vec<T: Real>(&mut self, len: usize) -> Vec<T> {
        (0..len).map(|_| self.gaussian()).collect()
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform<T: Real>(&mut self, lo: f64, hi: f64) -> T {
        T::lit(self.0.random_range(lo..hi))
    }

    pub fn shuffle<U>(&mut self, items: &mut [U]) {
        items.shuffle(&mut self.0);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random()
    }
}
