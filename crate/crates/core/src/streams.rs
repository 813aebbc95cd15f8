//! Seeded random streams.
//!
//! Every Monte-Carlo path draws from its own ChaCha stream identified by a
//! `(cell seed, path index)` pair. Cell seeds are derived from a root seed and
//! a cell *label* by hashing, so inserting or reordering cells in a sweep never
//! perturbs the stream of any other cell.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Derives the seed of a named cell from the root seed.
///
/// `seed = first 8 bytes (little endian) of SHA-256(root_le_bytes || label)`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Random stream for path `index` of the cell seeded with `cell_seed`.
pub fn path_rng(cell_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
    rng.set_stream(index);
    rng
}

/// Source of i.i.d. standard normal draws.
pub trait NormalStream {
    fn fill_standard_normal(&mut self, out: &mut [f64]);
}

/// Standard normals drawn directly from an RNG.
#[derive(Debug, Clone)]
pub struct RngNormals<R>(pub R);

impl<R: Rng> NormalStream for RngNormals<R> {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for o in out.iter_mut() {
            *o = self.0.sample(StandardNormal);
        }
    }
}

/// Coarsens a stream: each output vector is the normalised sum of `factor`
/// consecutive input vectors of the same length.
///
/// Driving a step of size `h` with `Aggregated(s, r)` reproduces the Brownian
/// increment that `r` steps of size `h / r` driven by `s` would see.
#[derive(Debug, Clone)]
pub struct Aggregated<S> {
    inner: S,
    factor: usize,
    scale: f64,
    buf: Vec<f64>,
}

impl<S: NormalStream> Aggregated<S> {
    pub fn new(inner: S, factor: usize) -> Self {
        assert!(factor >= 1, "aggregation factor must be positive");
        Self {
            inner,
            factor,
            scale: 1.0 / (factor as f64).sqrt(),
            buf: Vec::new(),
        }
    }

    pub fn factor(&self) -> usize {
        self.factor
    }
}

impl<S: NormalStream> NormalStream for Aggregated<S> {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        if self.factor == 1 {
            self.inner.fill_standard_normal(out);
            return;
        }
        self.buf.resize(out.len(), 0.0);
        out.iter_mut().for_each(|o| *o = 0.0);
        for _ in 0..self.factor {
            self.inner.fill_standard_normal(&mut self.buf);
            for (o, b) in out.iter_mut().zip(&self.buf) {
                *o += b;
            }
        }
        out.iter_mut().for_each(|o| *o *= self.scale);
    }
}

impl<S: NormalStream + ?Sized> NormalStream for &mut S {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        (**self).fill_standard_normal(out)
    }
}
