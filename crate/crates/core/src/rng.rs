//! Seeded, replayable random streams.
//!
//! Every consumer derives its generator from `(seed, stream)` so results do
//! not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name of the generator, recorded in output metadata.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha), seed_from_u64 + per-stream id";

/// Generator for one independent stream of a seeded experiment.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for element `index` of replicate `replicate`.
pub fn replicate_stream(replicate: u32, index: u64) -> u64 {
    ((replicate as u64) << 40) ^ index
}
