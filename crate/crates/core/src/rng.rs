//! Reproducible random streams.
//!
//! Every path of an ensemble draws from its own ChaCha stream, keyed by the
//! run seed and the path index, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type PathRng = ChaCha12Rng;

pub fn path_rng(seed: u64, path: u64) -> PathRng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}
