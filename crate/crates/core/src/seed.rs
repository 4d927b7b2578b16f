//! Seed derivation for independent random streams.
//!
//! Every stochastic stage draws from its own generator, seeded from the
//! session seed plus a stream label and an index, so that adding a stage or
//! changing chunking in one place never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub const STREAM_PAIRS: u64 = 0x5041_4952;
pub const STREAM_ARM_A: u64 = 0x4152_4d41;
pub const STREAM_ARM_B: u64 = 0x4152_4d42;
pub const STREAM_DETECT: u64 = 0x4445_5443;
pub const STREAM_BACKGROUND_A: u64 = 0x4247_5f41;
pub const STREAM_BACKGROUND_B: u64 = 0x4247_5f42;
pub const STREAM_DARK_A: u64 = 0x444b_5f41;
pub const STREAM_DARK_B: u64 = 0x444b_5f42;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream label and an index.
pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    let z = splitmix64(seed ^ splitmix64(stream));
    splitmix64(z ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
