//! Seeded, splittable random streams.
//!
//! Every stochastic computation takes an explicit [`Rng`]. Streams are
//! ChaCha8 keyed by a 64-bit seed and separated by a stream id, so workers
//! and pipeline stages draw from non-overlapping sequences.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Stream ids used by the pipeline stages.
pub mod streams {
    pub const SIMULATE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const INFER: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const BASELINE: u64 = 6;
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

/// Enough to resume a stream exactly where it stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngPosition {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner, seed }
    }

    /// An independent stream derived from this one's seed.
    pub fn split(&self, stream: u64) -> Rng {
        Rng::with_stream(self.seed, stream)
    }

    pub fn position(&self) -> RngPosition {
        RngPosition {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_position(p: RngPosition) -> Self {
        let mut r = Rng::with_stream(p.seed, p.stream);
        r.inner.set_word_pos(p.word_pos);
        r
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on the open interval (0, 1).
    pub fn open_uniform(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normals(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// A uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

impl RngCore for Rng {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_resumes_stream() {
        let mut a = Rng::with_stream(7, 3);
        for _ in 0..5 {
            a.normal();
        }
        let mut b = Rng::from_position(a.position());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn streams_differ() {
        let mut a = Rng::with_stream(7, 1);
        let mut b = Rng::with_stream(7, 2);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
