//! Seed plumbing. Every stochastic component draws from its own ChaCha
//! stream whose seed is derived from the experiment seed plus a stream tag,
//! so adding a client or a round never shifts another component's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags for [`derive_seed`].
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SELECTION: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const BLOBS: u64 = 5;
    pub const IID: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived(base: u64, tags: &[u64]) -> Rng {
    seeded(derive_seed(base, tags))
}
