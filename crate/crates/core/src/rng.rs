//! Seed derivation for independent, order-free random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of stream coordinates (client id, round,
/// purpose tag, ...) into a new 64-bit seed.
pub fn derive_seed(base: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(base), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(base: u64, coords: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, coords))
}

/// Purpose tags keep streams for different consumers disjoint.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const TARGET_NOISE: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const CLIENT: u64 = 5;
    pub const PROJECTION: u64 = 6;
    pub const SVD: u64 = 7;
}
