//! Seeded, independently addressable random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_FROZEN_ENCODER: u64 = 1;
pub const STREAM_FROZEN_LM: u64 = 2;
pub const STREAM_MAPPER_INIT: u64 = 3;
pub const STREAM_DATASET: u64 = 4;
pub const STREAM_SPLIT: u64 = 5;
pub const STREAM_SHUFFLE: u64 = 6;
/// Episode `i` of a stream draws from `STREAM_EPISODE_BASE + i`.
pub const STREAM_EPISODE_BASE: u64 = 1 << 32;
/// Sampling during generation for evaluation episode `i`.
pub const STREAM_GENERATION_BASE: u64 = 2 << 32;

/// Stream `stream` of the generator keyed by `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
