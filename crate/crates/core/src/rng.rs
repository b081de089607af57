//! Seeded random streams. Every consumer of randomness gets its own ChaCha
//! stream derived from the run seed, so e.g. batch order does not depend on
//! how many values parameter initialization consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids. Shuffling uses `SHUFFLE + epoch`.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const SYNTH_PROTOTYPES: u64 = 3;
    pub const SYNTH_TEXT: u64 = 4;
    pub const SYNTH_TRAIN: u64 = 5;
    pub const SYNTH_TEST: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const SYNTH_GAP: u64 = 8;
    pub const SYNTH_BASIS: u64 = 9;
    pub const SHUFFLE: u64 = 1 << 32;
}

pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
