//! Seed derivation for reproducible, schedule-independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into a single 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EA_A11C_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A ChaCha stream keyed by `parts`. Two calls with the same parts yield the same stream.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Domain tags that keep independent streams apart.
pub mod tag {
    pub const SAMPLER: u64 = 1;
    pub const EVAL_NOISE: u64 = 2;
    pub const BASELINE: u64 = 3;
    pub const SYNTHETIC: u64 = 4;
    pub const DRIFT: u64 = 5;
    pub const TRUE_VALUE: u64 = 6;
}
