//! Seeded random streams. Every independent unit of work (a trial, a task,
//! a training iteration) draws from its own ChaCha stream derived from a
//! base seed, so results do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `index` of the generator seeded with `seed`.
pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Stream for a two-level index such as `(purpose, item)`.
pub fn substream(seed: u64, purpose: u64, index: u64) -> Rng {
    stream(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15), index)
}
