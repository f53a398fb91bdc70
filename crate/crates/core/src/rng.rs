//! Keyed random streams.
//!
//! Every draw comes from a generator seeded by `(seed, purpose, key)`, so the
//! draws for one vehicle never depend on how many other draws happened
//! before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    ArrivalMain = 1,
    ArrivalRamp = 2,
    Class = 3,
    EntrySpeed = 4,
    Driver = 5,
    Sweep = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of words into one 64-bit value.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x6A09_E667_F3BC_C908, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

pub fn stream(seed: u64, purpose: Purpose, key: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, purpose as u64, key]))
}
