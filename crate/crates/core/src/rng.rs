//! Deterministic random streams.
//!
//! A run owns one master seed. Every consumer gets its own ChaCha stream
//! keyed by what it is (upper sampler, a lower task, the roulette wheel) and
//! the upper generation it belongs to, so adding or skipping executions in one
//! task never shifts the numbers drawn by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

/// Stream identifiers within one upper generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Upper,
    Roulette,
    Task(usize),
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0,
            Stream::Upper => 1,
            Stream::Roulette => 2,
            Stream::Task(k) => 3 + k as u64,
        }
    }
}

/// Child stream for `(generation, stream)` under `seed`.
pub fn child(seed: u64, generation: usize, stream: Stream) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((generation as u64) << 24) ^ stream.tag());
    rng
}

/// Plain seeded stream, for callers that do not need splitting.
pub fn seeded(seed: u64) -> RunRng {
    ChaCha8Rng::seed_from_u64(seed)
}
