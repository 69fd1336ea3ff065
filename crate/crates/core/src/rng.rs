//! Seed splitting.
//!
//! Every random stream in the toolchain is derived from one user seed plus a
//! path of counters (chain, block, iteration, location, ...). The path is folded
//! through SplitMix64 and the result seeds a ChaCha8 generator, so a stream
//! depends only on its own path and never on how many draws another stream
//! consumed or which thread ran it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SfRng = ChaCha8Rng;

/// Stream identifiers for the sampler blocks and the other random consumers.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const LATENT: u64 = 2;
    pub const BETA: u64 = 3;
    pub const LOADINGS: u64 = 4;
    pub const GAMMA: u64 = 5;
    pub const NUGGET: u64 = 6;
    pub const DECAY: u64 = 7;
    pub const IMPUTE: u64 = 8;
    pub const PREDICT: u64 = 9;
    pub const SIMULATE: u64 = 10;
    pub const SUBSAMPLE: u64 = 11;
    pub const SHIFT: u64 = 12;
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Fold a counter path into a 64-bit key.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    let mut key = splitmix64(seed);
    for &p in path {
        key = splitmix64(key ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    key
}

/// Generator for the stream at `path` under `seed`.
pub fn stream_rng(seed: u64, path: &[u64]) -> SfRng {
    SfRng::seed_from_u64(derive_key(seed, path))
}
