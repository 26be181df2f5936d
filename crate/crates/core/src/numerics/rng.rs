//! Seeded, splittable random streams.
//!
//! A stream is keyed by `(seed, stream_id)`: the seed selects a ChaCha20 key
//! and the stream id selects one of its 2^64 independent nonce streams. Stream
//! ids for experiment cells are packed from coordinates with [`stream_id`], so
//! a cell's draws never depend on which other cells ran or in what order.
//!
//! Normals use the Box–Muller transform on 53-bit uniforms, with the cosine
//! branch emitted first and the sine branch cached for the next call.
//! Transcendentals go through `libm` so sequences are bit-identical across
//! platforms.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

use super::Matrix;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh stream under the same seed whose id mixes this stream's id with `coords`.
    pub fn derive(&self, coords: &[u64]) -> RngStream {
        let mut parts = Vec::with_capacity(coords.len() + 1);
        parts.push(self.stream);
        parts.extend_from_slice(coords);
        RngStream::new(self.seed, stream_id(&parts))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform integer in `0..n` by rejection, so there is no modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53;
        let u2 = (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53;
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * libm::sin(theta));
        radius * libm::cos(theta)
    }
}

/// Packs coordinates into one 64-bit stream id (splitmix64 fold).
pub fn stream_id(coords: &[u64]) -> u64 {
    let mut h: u64 = 0x6a09_e667_f3bc_c908;
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c));
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Matrix of iid `N(mean, variance)` entries, filled in row-major order.
///
/// Row-major filling means the first `k` rows of a draw do not depend on how
/// many rows were requested.
pub fn gaussian_fill(rows: usize, cols: usize, mean: f64, variance: f64, rng: &mut RngStream) -> Result<Matrix> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::domain(format!(
            "variance must be finite and >= 0, got {variance}"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::domain(format!(
            "matrix dimensions must be positive, got {rows}x{cols}"
        )));
    }
    let sd = variance.sqrt();
    let data = (0..rows * cols).map(|_| mean + sd * rng.standard_normal()).collect();
    Matrix::new(rows, cols, data)
}
