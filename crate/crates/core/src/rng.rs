//! Seeded random streams.
//!
//! Every stochastic step draws from its own ChaCha stream derived from one
//! user seed, so synthesis, fold assignment and initialization can be
//! reproduced independently of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Synthesis = 1,
    Folds = 2,
    Init = 3,
    Reference = 4,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
