//! Deterministic seed derivation.
//!
//! Every independent unit of work (fold, model, hyperparameter cell) gets its
//! own generator derived from a base seed and a stream tag, so results do not
//! depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, tag: u64) -> u64 {
    mix(mix(base) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Derives a seed from a base seed and a textual stream name.
pub fn derive_str(base: u64, tag: &str) -> u64 {
    // FNV-1a over the tag bytes
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01B3);
    }
    derive(base, h)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
