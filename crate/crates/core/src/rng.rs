//! Deterministic random streams.
//!
//! Every random decision in training is drawn from a ChaCha8 stream whose key
//! is derived from `(seed, domain, a, b)`. Results therefore depend only on the
//! seed and the position of the draw (epoch, sample, batch), never on how many
//! draws happened before, which is what makes checkpoint resume exact.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream domains. Distinct constants keep independent uses from colliding.
pub mod domain {
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const AUGMENT: u64 = 0x4155_4721;
    pub const MIX: u64 = 0x4d49_5821;
    pub const INIT: u64 = 0x494e_4954;
    pub const SYNTH: u64 = 0x5359_4e54;
    pub const EVAL: u64 = 0x4556_414c;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a seed with a domain tag and two coordinates into a 64-bit key.
pub fn derive_key(seed: u64, domain: u64, a: u64, b: u64) -> u64 {
    let mut k = splitmix(seed ^ splitmix(domain));
    k = splitmix(k ^ a);
    splitmix(k ^ b.rotate_left(17))
}

/// A fresh stream for `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> Rng {
    Rng::seed_from_u64(derive_key(seed, domain, a, b))
}

/// Splits an independent child stream off `parent`.
pub fn fork(parent: &mut Rng) -> Rng {
    Rng::seed_from_u64(parent.next_u64())
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
