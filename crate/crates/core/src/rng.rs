//! Deterministic RNG streams.
//!
//! Every random draw in a run comes from a stream keyed by the run seed plus a
//! list of tags (client id, round, purpose), so parallel workers never share
//! state and results do not depend on scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SimRng = ChaCha8Rng;

/// Stream purposes, mixed into the key so two uses of the same
/// (seed, client, round) never collide.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const SYNTHETIC: u64 = 5;
    pub const MIX: u64 = 6;
    pub const TRIAL: u64 = 7;
    pub const ATTACK: u64 = 8;
    pub const SPLIT: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from a seed and tags.
pub fn derive_key(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019))))
}

/// Opens the stream for `(seed, tags)`.
pub fn stream(seed: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_key(seed, tags))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
