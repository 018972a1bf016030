//! Keyed, counter-free randomness.
//!
//! Every random decision in the crate is derived from a root seed plus a
//! small tuple of integers identifying the decision (epoch, image id,
//! iteration, ...). The tuple is folded through SplitMix64 and either used
//! directly as a uniform draw or used to seed a ChaCha8 stream. Decisions
//! therefore do not depend on evaluation order, which keeps parallel epoch
//! realization and reordered inputs reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain-separation tags so different consumers of the same key never
/// collide.
pub(crate) mod tag {
    pub const ROUNDING: u64 = 0x5246_535f_524f_554e;
    pub const SHUFFLE: u64 = 0x5246_535f_5348_5546;
    pub const BANK_SAMPLE: u64 = 0x4241_4e4b_5341_4d50;
    pub const PROTOTYPE: u64 = 0x5052_4f58_5052_4f54;
    pub const DIRECTION: u64 = 0x5052_4f58_4449_5245;
    pub const NOISE: u64 = 0x5052_4f58_4e4f_4953;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into a single 64-bit key rooted at `seed`.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn unit(seed: u64, parts: &[u64]) -> f64 {
    (mix(seed, parts) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// ChaCha8 stream keyed on `(seed, parts)`.
pub fn rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, parts))
}
