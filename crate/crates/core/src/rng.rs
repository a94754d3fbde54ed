//! Seeded random streams.
//!
//! All randomness goes through ChaCha8 with an explicit 64-bit seed and a
//! stream number, so generated bytes do not depend on the platform or on the
//! order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent stream `stream` derived from `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream identifiers reserved for the different consumers of one seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const DATA: u64 = 1 << 32;
}
