//! Seed fan-out. A single run seed is split into independent per-stage
//! streams by hashing the stage name together with the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the sub-seed for `stage` from `seed`.
pub fn derive(seed: u64, stage: &str) -> u64 {
    splitmix64(seed ^ fnv1a(stage.as_bytes()))
}

/// Same as [`derive`] with an integer index appended (epochs, repeats, ...).
pub fn derive_indexed(seed: u64, stage: &str, index: u64) -> u64 {
    splitmix64(derive(seed, stage) ^ splitmix64(index))
}

pub fn rng(seed: u64, stage: &str) -> Rng {
    Rng::seed_from_u64(derive(seed, stage))
}

pub fn rng_indexed(seed: u64, stage: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(seed, stage, index))
}
