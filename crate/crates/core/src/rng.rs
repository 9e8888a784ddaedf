//! Deterministic random streams derived from a run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for; keeps streams for different purposes
/// independent even when they share a seed and epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Shuffle = 1,
    Attack = 2,
    Criticality = 3,
    Evaluation = 4,
    Probe = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `(seed, epoch, purpose)`. Depends on nothing else, so a run
/// resumed from a checkpoint draws exactly the numbers it would have drawn.
pub fn stream(seed: u64, epoch: u64, purpose: Purpose) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ epoch) ^ purpose as u64);
    ChaCha8Rng::seed_from_u64(key)
}
