//! Counter-based random streams.
//!
//! Every draw is addressed by `(seed, stream, key, slot)`: the seed and stream
//! select a ChaCha key, the key (usually a particle identifier) selects the
//! ChaCha stream and the slot (usually a step index) the block counter. A
//! draw therefore never depends on how many other draws happened before it,
//! on which thread, or in which order.

use std::f64::consts::PI;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// 32-bit words reserved per slot; enough for 15 standard normals.
const WORDS_PER_SLOT: u128 = 64;

/// Stream identifiers for the independent families of draws.
pub mod stream {
    pub const INCREMENTS: u64 = 1;
    pub const INITIAL: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const DIRECTIONS: u64 = 4;
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator positioned at the start of `(seed, stream, key, slot)`.
pub fn keyed_rng(seed: u64, stream: u64, key: u64, slot: u64) -> ChaCha8Rng {
    let mut state = seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(bytes);
    rng.set_stream(key);
    rng.set_word_pos(slot as u128 * WORDS_PER_SLOT);
    rng
}

/// Uniform on `[0, 1)` with 53 random bits.
#[inline]
pub fn uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fills `out` with standard normals by Box-Muller, consuming exactly two
/// 64-bit words per pair.
pub fn fill_standard_normal(rng: &mut impl RngCore, out: &mut [f64]) {
    for pair in out.chunks_mut(2) {
        let u1 = 1.0 - uniform(rng);
        let u2 = uniform(rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        pair[0] = r * theta.cos();
        if pair.len() > 1 {
            pair[1] = r * theta.sin();
        }
    }
}

/// Pre-addressed Gaussian increments `N(0, dt I_d)` keyed by particle and step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrownianStore {
    seed: u64,
    dt: f64,
    dim: usize,
    scale: f64,
}

impl BrownianStore {
    pub fn new(seed: u64, dt: f64, dim: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        if dim == 0 || dim > 15 {
            return Err(Error::Domain(format!("unsupported dimension {dim}")));
        }
        Ok(Self { seed, dt, dim, scale: dt.sqrt() })
    }

    /// Store whose increments are all zero (deterministic dynamics).
    pub fn zero(seed: u64, dt: f64, dim: usize) -> Result<Self> {
        let mut s = Self::new(seed, dt, dim)?;
        s.scale = 0.0;
        Ok(s)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Increment of particle `key` over step `step`.
    pub fn increment(&self, key: u64, step: u64, out: &mut [f64]) {
        let out = &mut out[..self.dim];
        if self.scale == 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let mut rng = keyed_rng(self.seed, stream::INCREMENTS, key, step);
        fill_standard_normal(&mut rng, out);
        out.iter_mut().for_each(|v| *v *= self.scale);
    }

    /// Generator for the initial sample of particle `key`, disjoint from the
    /// increment streams.
    pub fn initial_rng(&self, key: u64) -> ChaCha8Rng {
        keyed_rng(self.seed, stream::INITIAL, key, 0)
    }
}
