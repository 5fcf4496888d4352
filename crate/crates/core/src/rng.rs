//! Seed derivation. Every random stream in a run is a `ChaCha8Rng` keyed by
//! `(run seed, stream tag, index)`, so results depend only on the config.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ index)
}

pub fn stream(seed: u64, stream: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, index))
}

pub mod streams {
    pub const EMBEDDINGS: u64 = 1;
    pub const EPISODE: u64 = 2;
    pub const NETWORK_INIT: u64 = 3;
    pub const ACTIONS: u64 = 4;
    pub const REPLAY: u64 = 5;
    pub const EVAL: u64 = 6;
}
