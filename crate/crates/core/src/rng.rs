//! Seeded random streams.
//!
//! Every consumer of randomness derives its own stream from the run seed and
//! a tuple of coordinates, so results never depend on scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Independent stream tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Pretrain = 2,
    Embed = 3,
    Rollout = 4,
    RolloutNoise = 5,
    Loss = 6,
    Prompts = 7,
    Eval = 8,
    Task = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream keyed by `(seed, tag, coords...)`.
    pub fn derive(seed: u64, tag: Stream, coords: &[u64]) -> Self {
        let mut h = splitmix(seed ^ splitmix(tag as u64));
        for &c in coords {
            h = splitmix(h ^ splitmix(c.wrapping_add(0x51_7C_C1B7)));
        }
        Self::from_seed(h)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on (0, 1].
    pub fn uniform_open_closed(&mut self) -> f64 {
        1.0 - self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}
