//! Counter-style random streams.
//!
//! Every trajectory gets its own ChaCha stream addressed by
//! `(master_seed, index)`, so ensembles give bit-identical results no matter
//! how the work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent stream `index` under `master_seed`.
pub fn stream(master_seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Derives a child master seed, used to give sub-experiments (one per `tau`,
/// one per radius, ...) unrelated stream families.
pub fn derive_seed(master_seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master_seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
