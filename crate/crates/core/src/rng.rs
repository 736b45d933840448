//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha stream whose seed is a hash of
//! a master seed and a small tuple of stream coordinates (epoch, sample index,
//! purpose tag). Streams are therefore independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purpose tags.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const MIXUP: u64 = 5;
    pub const PHANTOM: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const HEAD: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with stream coordinates into a single 64-bit seed.
pub fn derive_seed(master: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(splitmix64(master), |acc, &c| {
        splitmix64(acc ^ splitmix64(c))
    })
}

pub fn stream(master: u64, coords: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, coords))
}
