//! Seed derivation.
//!
//! Every random stream is a ChaCha8 generator keyed by a 64-bit seed and
//! selected by a stream number, so a run's split, initialisation, dropout
//! masks and batch order are independent and reproducible regardless of
//! how many runs execute concurrently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SPLIT: u64 = 0;
pub const INIT: u64 = 1;
pub const DROPOUT: u64 = 2;
pub const SHUFFLE: u64 = 3;
pub const SHAP: u64 = 4;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for replicate `k` of a run family started at `base`.
pub fn replicate_seed(base: u64, k: usize) -> u64 {
    base.wrapping_add(k as u64)
}
