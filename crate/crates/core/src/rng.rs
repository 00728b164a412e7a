//! Deterministic random streams.
//!
//! All randomness flows from a 64-bit seed through ChaCha8, which produces the
//! same stream on every platform. Independent sub-streams are derived by
//! mixing a fixed offset into the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sub-stream `stream` of `seed` (splitmix64 finalizer over the pair).
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}
