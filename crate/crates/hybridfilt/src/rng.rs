//! Reproducible random number streams.
//!
//! All randomness in the crate flows through ChaCha12, a counter-based stream
//! cipher RNG: a (seed, stream) pair fully determines the sequence, streams
//! with the same seed are statistically independent, and any stream can be
//! re-opened without replaying the others. The simulator draws its diffusion
//! noise and its transition clocks from separate streams so that one can be
//! replayed while the other is re-seeded; Monte-Carlo particle code derives
//! one stream per particle.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stream ids used by the simulator; particle code starts at `PARTICLE_BASE`.
pub const STREAM_DIFFUSION: u64 = 0;
pub const STREAM_CLOCKS: u64 = 1;
pub const PARTICLE_BASE: u64 = 16;

/// Open the ChaCha12 stream `stream` of the generator family keyed by `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
