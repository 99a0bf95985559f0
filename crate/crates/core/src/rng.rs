//! Seeded random streams.
//!
//! Every run derives its generator from a `(seed, stream)` pair so replicates
//! and estimators can draw independently yet reproducibly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// ChaCha8 generator keyed by `seed` on stream `stream`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic per-replicate seed derived with SplitMix64.
pub fn replicate_seed(seed: u64, replicate: u64) -> u64 {
    let mut z = seed.wrapping_add(replicate.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
