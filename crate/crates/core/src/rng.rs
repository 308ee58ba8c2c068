//! Seed derivation.
//!
//! Every random stream in the crate is keyed by `(seed, domain, index)` so
//! that work split across threads draws the same numbers as a serial run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent stream domains. Values are arbitrary but must stay stable,
/// since changing one changes every seeded result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Respondents = 0x5245_5350,
    Tasks = 0x5441_534b,
    Choices = 0x4348_4f49,
    Chains = 0x4348_4149,
    Market = 0x4d41_524b,
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (domain as u64).rotate_left(29));
    rng.set_stream(index);
    rng
}
