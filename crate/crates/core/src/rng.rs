//! Seed derivation for reproducible, independent random streams.
//!
//! Every randomized stage of the pipeline (config sampling, weight init,
//! batch shuffling, DP noise, splits, search trials) draws from its own
//! `ChaCha12Rng` seeded through [`derive_seed`]. Two streams with different
//! ids are decorrelated even when the base seeds are small consecutive
//! integers, and a run is reproducible from a single top-level seed
//! regardless of thread count.

use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; decorrelates nearby inputs.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a stream id.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

/// A fresh deterministic RNG for `(base, stream)`.
pub fn stream_rng(base: u64, stream: u64) -> ChaCha12Rng {
    use rand::SeedableRng;
    ChaCha12Rng::seed_from_u64(derive_seed(base, stream))
}
