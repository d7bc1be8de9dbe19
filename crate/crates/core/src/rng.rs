//! Seeded random streams.
//!
//! Every run owns its generators. A master seed is split into independent
//! substreams with ChaCha's stream counter, so adding consumers on one stream
//! (say, extra evaluation episodes) never shifts the numbers another stream
//! sees.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type SeededRng = ChaCha8Rng;

/// Well-known substream ids for a single run.
pub mod stream {
    pub const ENV: u64 = 0;
    pub const AGENT: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const FIXTURE: u64 = 3;
}

/// Generator for substream `id` of `seed`.
pub fn substream(seed: u64, id: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Derives a child seed from `(seed, id)`; used to build nested stream trees
/// such as run -> agent -> chain m.
pub fn child_seed(seed: u64, id: u64) -> u64 {
    substream(seed, id).next_u64()
}
