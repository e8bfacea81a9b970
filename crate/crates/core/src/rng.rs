//! Counter-based random streams.
//!
//! Every stream is addressed by `(seed, stream_id)` and a 128-bit word
//! counter. The ChaCha20 block function maps the triple to output words, so
//! the n-th word of a stream is a pure function of `(seed, stream_id, n)`.
//! Chain `c` of a run always draws from `stream_id = c`, whatever thread it
//! lands on.

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// A replayable, splittable random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        inner.set_word_pos(0);
        Self { seed, stream_id, inner }
    }

    /// The stream positioned at an arbitrary word counter.
    pub fn at(seed: u64, stream_id: u64, counter: u128) -> Self {
        let mut s = Self::new(seed, stream_id);
        s.inner.set_word_pos(counter);
        s
    }

    /// A sibling stream with the same seed.
    pub fn split(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
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

/// A `rows x cols` matrix of i.i.d. `N(0, stddev^2)` entries, filled in
/// column-major order.
///
/// Panics if `stddev` is not a positive finite number.
pub fn gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize, stddev: f64) -> DMatrix<f64> {
    assert!(stddev > 0.0 && stddev.is_finite(), "stddev must be positive and finite, got {stddev}");
    DMatrix::from_fn(rows, cols, |_, _| stddev * rng.standard_normal())
}
