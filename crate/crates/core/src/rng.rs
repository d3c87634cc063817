//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the 64-bit experiment seed.
//! The ChaCha stream id selects the purpose (and, for per-example streams,
//! the example index), so draws for one purpose never shift when another
//! purpose consumes more or fewer numbers. ChaCha8 output is specified
//! bit-for-bit, which makes sequences identical across platforms.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Real;

/// What a random stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Sampling = 2,
    AttackNoise = 3,
    BaselineNoise = 4,
    Batching = 5,
    Data = 6,
    Pretrain = 7,
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, (stream as u64) << 48)
    }

    /// Independent stream for one example of a purpose: stream id is
    /// `purpose << 48 | index`.
    pub fn for_example(seed: u64, stream: Stream, index: u64) -> Self {
        assert!(index < 1 << 48, "example index out of range");
        Self::with_stream_id(seed, (stream as u64) << 48 | index)
    }

    fn with_stream_id(seed: u64, id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(id);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `[0, n)` via the 128-bit multiply-high reduction
    /// `(next_u64() * n) >> 64`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_real<T: Real>(&mut self, std: f64) -> T {
        T::from_f64(self.normal() * std)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen_bool(p)
    }

    /// Fisher–Yates from the back: for `i = n-1 .. 1`, swap `i` with
    /// `below(i + 1)`.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
