//! Counter-based seed derivation so Monte-Carlo results do not depend on how
//! work is split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for frame `frame` of sweep point `point` under `master`.
pub fn derive_seed(master: u64, point: u64, frame: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ point) ^ frame)
}

pub fn frame_rng(master: u64, point: u64, frame: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, point, frame))
}

/// Independent sub-stream of an existing seed, e.g. channel vs. noise.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream.wrapping_add(0x51ed))))
}
