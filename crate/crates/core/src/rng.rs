//! Deterministic random streams derived from a single run seed.
//!
//! Each consumer of randomness (weight init, data shuffling, stochastic
//! rounding, synthetic data, probe directions) draws from its own named
//! ChaCha8 stream. Streams are independent of one another, so adding draws
//! to one stage never perturbs the values another stage sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The independent random streams a run may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Weight initialization.
    Init,
    /// Per-epoch example shuffling.
    Shuffle,
    /// Stochastic rounding draws.
    Rounding,
    /// Synthetic dataset generation.
    Synth,
    /// Random directions for loss-landscape probes.
    Directions,
}

impl Stream {
    fn index(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Shuffle => 2,
            Stream::Rounding => 3,
            Stream::Synth => 4,
            Stream::Directions => 5,
        }
    }
}

/// RNG for one named stream of the given run seed.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.index());
    rng
}

/// RNG for a keyed substream, e.g. one per epoch or per layer.
pub fn keyed_rng(seed: u64, stream: Stream, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Streams are 64-bit; reserve the low byte for the stream id.
    rng.set_stream(stream.index() | (key << 8));
    rng
}
