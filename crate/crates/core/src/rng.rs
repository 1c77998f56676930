//! Named, independent random streams derived from one experiment seed.
//!
//! Every consumer of randomness (each worker's oracle, the adversary, the
//! block selector, each quantizer) owns a [`RngStream`] keyed by
//! `(seed, StreamId)`. The underlying ChaCha8 generator is seeded with the
//! experiment seed and placed on a stream number derived from the id, so the
//! draw sequence of one stream never depends on how much another stream
//! consumed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamId {
    Worker(u32),
    Adversary,
    Selector,
    Quantizer(u32),
    Sampler,
    Data,
    Init,
    Custom(u32),
}

impl StreamId {
    fn code(self) -> u64 {
        let (tag, idx): (u64, u32) = match self {
            StreamId::Worker(i) => (1, i),
            StreamId::Adversary => (2, 0),
            StreamId::Selector => (3, 0),
            StreamId::Quantizer(i) => (4, i),
            StreamId::Sampler => (5, 0),
            StreamId::Data => (6, 0),
            StreamId::Init => (7, 0),
            StreamId::Custom(i) => (8, i),
        };
        (tag << 32) | u64::from(idx)
    }
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(id.code());
        Self { seed, id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
