//! Seed derivation. Every random stream in a run is keyed by the master seed
//! and a path of integers, so any stream can be regenerated on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes `master` and `path` into a child seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Generator for the stream at `path` below `master`.
pub fn stream(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// Stream labels, so call sites read as names rather than magic numbers.
pub mod label {
    pub const CMB: u64 = 1;
    pub const FOREGROUND: u64 = 2;
    pub const FOREGROUND_MOD: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const DROPOUT: u64 = 8;
    pub const VALIDATION: u64 = 9;
    pub const TRANSFER: u64 = 10;
    pub const MC: u64 = 11;
}
