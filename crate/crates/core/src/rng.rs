//! Random streams.
//!
//! Every run uses ChaCha8 seeded with `seed_from_u64(seed)`. Each consumer
//! draws from its own stream (`set_stream`), so adding draws in one consumer
//! never shifts another consumer's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator name and version recorded in trace headers.
pub const RNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.9, seed_from_u64 + set_stream)";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Bernoulli masks of the tracking controller.
    Mask = 1,
    /// Scenario randomization: plants, targets, random instances.
    ScenarioNoise = 2,
    /// Draws made by the statistical suites.
    Verify = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
