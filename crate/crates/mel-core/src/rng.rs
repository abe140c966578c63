//! Counter-based deterministic randomness.
//!
//! Every random draw in the engine comes from a ChaCha8 stream whose seed is
//! derived from the run seed plus a purpose tag and position counters
//! (step, query index, sample index, ...). Streams are therefore independent
//! of each other and of execution order: skipping a whole pipeline stage
//! (e.g. the meta-experience pass when its weight is zero) does not shift
//! the draws any other stage sees, and resuming from a checkpoint replays
//! the exact continuation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keeping unrelated streams apart.
pub mod stream {
    pub const TASK_GEN: u64 = 0x01;
    pub const ROLLOUT: u64 = 0x02;
    pub const PAIRING: u64 = 0x03;
    pub const REPLAY: u64 = 0x04;
    pub const TASK_ORDER: u64 = 0x05;
    pub const EVAL: u64 = 0x06;
}

/// splitmix64 finalizer; decorrelates nearby counter values.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold `parts` into `base` one counter at a time.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut acc = mix(base);
    for &p in parts {
        acc = mix(acc ^ mix(p));
    }
    acc
}

/// Fresh ChaCha8 stream for a derived seed.
pub fn stream_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
