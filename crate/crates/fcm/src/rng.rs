//! Seed-derived RNG streams.
//!
//! Every consumer of randomness (init, data order, mask sampling, dropout,
//! evaluation) gets its own ChaCha8 stream derived from the run seed, a stream
//! tag and an index (step number, epoch, instance). Streams never share state,
//! so e.g. turning dropout on cannot shift the mask plans or the batch order,
//! and any step's draws can be reproduced without replaying earlier steps.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_DATA: u64 = 2;
pub const STREAM_MASK: u64 = 3;
pub const STREAM_DROPOUT: u64 = 4;
pub const STREAM_EVAL: u64 = 5;
pub const STREAM_SYNTH: u64 = 6;

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
