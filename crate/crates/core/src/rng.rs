//! Seed derivation. Every random stream is a pure function of the run seed
//! and a path of tags, so parallel and serial runs draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base ^ 0x9e37_79b9_7f4a_7c15), |acc, &p| {
        mix(acc.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(mix(p)))
    })
}

pub fn stream(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Stable numeric tag for a string label.
pub fn tag(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
