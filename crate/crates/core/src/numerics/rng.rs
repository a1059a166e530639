//! Seeded, stream-split randomness.
//!
//! Every generator is ChaCha8 keyed by `seed` (expanded through
//! `SeedableRng::seed_from_u64`) with the 64-bit ChaCha stream id set to
//! `stream_id`. ChaCha is counter based, so a `(seed, stream_id)` pair pins the
//! output sequence on every platform, and distinct stream ids give
//! non-overlapping keystreams.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Well-known stream ids. Each consumer of randomness owns one.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const FRONTEND: u64 = 2;
    pub const DATA: u64 = 3;
    pub const MASK: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const SEARCH: u64 = 6;
    pub const EVAL_MASK: u64 = 7;
    pub const BATCH: u64 = 8;
    pub const PROBE: u64 = 9;
    pub const TEACHER: u64 = 10;
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Fresh generator on another stream of the same seed.
    pub fn split(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
