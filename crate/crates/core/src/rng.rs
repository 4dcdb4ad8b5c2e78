//! Seeded, counter-based random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` derived from `seed`.
pub fn stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed `index` of `seed`, for splitting one run seed across independent jobs.
pub fn derive(seed: u64, index: u64) -> u64 {
    use rand::RngCore;
    stream(seed, 0x5EED_0000 ^ index).next_u64()
}
