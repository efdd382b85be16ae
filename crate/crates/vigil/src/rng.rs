//! Seeded randomness helpers. Every generator in the pipeline is a ChaCha8
//! stream derived from a caller-supplied 64-bit seed, so outputs are a pure
//! function of their spec and seeds on every platform.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a string, folded into a base seed. Used to derive per-scene
/// and per-event streams from one corpus seed without collisions between
/// sibling ids. Stable by construction (std hashers are not).
pub fn mix_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in tag.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ base.rotate_left(17)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A seeded stream with its stream id, position-restorable for checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngState {
            seed,
            stream,
            word_pos: 0,
        }
    }

    pub fn to_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn capture(&mut self, rng: &ChaCha8Rng) {
        self.word_pos = rng.get_word_pos();
    }
}

/// Fisher-Yates over index positions.
pub fn shuffle_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Uniform f64 in [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let unit = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    lo + (hi - lo) * unit
}

/// Uniform integer in [lo, hi] inclusive.
pub fn uniform_int(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> i64 {
    debug_assert!(hi >= lo);
    let span = (hi - lo + 1) as u64;
    lo + (rng.next_u64() % span) as i64
}

/// Standard normal via Box-Muller; used for weight init.
pub fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    let u1 = uniform(rng, f64::MIN_POSITIVE, 1.0);
    let u2 = uniform(rng, 0.0, 1.0);
    mean + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
