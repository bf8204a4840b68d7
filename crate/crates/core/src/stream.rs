//! Seed-addressed random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by the
//! master seed and a stream id, so results never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream ids at the top of the id space are reserved for one-off draws
/// (observed data, SPSA-DM perturbations); replicates use the bottom.
const OBSERVED_DATA: u64 = u64::MAX;
const DM_PERTURBATION: u64 = u64::MAX - 1;

pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn replicate_data(seed: u64, k: usize) -> StreamRng {
    stream(seed, 2 * k as u64)
}

pub fn replicate_perturbation(seed: u64, k: usize) -> StreamRng {
    stream(seed, 2 * k as u64 + 1)
}

pub fn observed_data(seed: u64) -> StreamRng {
    stream(seed, OBSERVED_DATA)
}

pub fn dm_perturbation(seed: u64) -> StreamRng {
    stream(seed, DM_PERTURBATION)
}
