//! Deterministic per-replicate random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the master seed, with the
//! 64-bit stream selector encoding `(purpose, p, replicate)`. Streams are
//! independent of how many replicates are run, so growing a study never
//! perturbs the draws of the replicates it already had.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for; keeps design draws apart from response draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Design = 1,
    Replicate = 2,
    Posterior = 3,
    Auxiliary = 4,
}

/// Stream for `(purpose, p, replicate)` under `master_seed`.
pub fn stream(master_seed: u64, purpose: Purpose, p: usize, replicate: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let selector = ((purpose as u64) << 56) | (((p as u64) & 0xFF_FFFF) << 32) | (replicate & 0xFFFF_FFFF);
    rng.set_stream(selector);
    rng
}

/// Plain seeded generator for one-off use.
pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
