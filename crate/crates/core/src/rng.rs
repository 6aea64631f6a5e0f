//! Seed derivation: every independent stream is keyed by `(seed, parts...)`
//! so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn derive_rng(seed: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Stream labels used with [`derive_rng`].
pub mod stream {
    pub const LABELS: u64 = 1;
    pub const APP: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const PAIR: u64 = 4;
    pub const INIT: u64 = 5;
    pub const PRETRAIN: u64 = 6;
    pub const HEAD: u64 = 7;
    pub const GRADCHECK: u64 = 8;
}
