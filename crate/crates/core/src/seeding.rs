//! Deterministic RNG streams.
//!
//! Every random decision draws from a ChaCha8 stream keyed by the run seed and
//! a stream id packing `(purpose, iteration, slot)`. Streams are independent,
//! so parallel rollouts see the same draws regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Occupies the top byte of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    TeacherTable = 1,
    PromptPool = 2,
    StudentInit = 3,
    PromptBatch = 4,
    Rollout = 5,
    MinibatchShuffle = 6,
    Evaluation = 7,
}

/// Packs `(purpose, iteration, slot)`; iteration uses 32 bits, slot 24.
pub fn stream_id(purpose: Purpose, iteration: u64, slot: u64) -> u64 {
    ((purpose as u64) << 56) | ((iteration & 0xffff_ffff) << 24) | (slot & 0xff_ffff)
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn purpose_rng(seed: u64, purpose: Purpose, iteration: u64, slot: u64) -> ChaCha8Rng {
    stream_rng(seed, stream_id(purpose, iteration, slot))
}
