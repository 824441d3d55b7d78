//! Deterministic seed derivation.
//!
//! Every stochastic choice in the pipeline draws from a ChaCha stream keyed
//! by a splitmix-mixed (seed, salt, ...) tuple. Separate salts keep the
//! streams independent: adding draws to one consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub const SALT_SCENARIO: u64 = 0x5ce1_a710_0000_0001;
pub const SALT_PATHS: u64 = 0x5ce1_a710_0000_0002;
pub const SALT_SPLIT: u64 = 0x5ce1_a710_0000_0003;
pub const SALT_RECORD: u64 = 0x5ce1_a710_0000_0004;
pub const SALT_INIT: u64 = 0x5ce1_a710_0000_0005;
pub const SALT_TRAIN_MASK: u64 = 0x5ce1_a710_0000_0006;
pub const SALT_VAL_MASK: u64 = 0x5ce1_a710_0000_0007;
pub const SALT_SHUFFLE: u64 = 0x5ce1_a710_0000_0008;
pub const SALT_NOISE: u64 = 0x5ce1_a710_0000_0009;
pub const SALT_HEAD_INIT: u64 = 0x5ce1_a710_0000_000a;
pub const SALT_BUDGET: u64 = 0x5ce1_a710_0000_000b;
pub const SALT_PROBE: u64 = 0x5ce1_a710_0000_000c;

/// splitmix64 finalizer; a single mixing round of the input.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive mix of two words.
pub fn mix2(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.rotate_left(32))
}

pub fn mix3(a: u64, b: u64, c: u64) -> u64 {
    mix2(mix2(a, b), c)
}

/// Deterministic RNG for the given derived seed.
pub fn rng_from(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
