//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] derived from a
//! root seed and a stream name, so components can be re-seeded on their own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the named substream of `root`.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    let mut h = splitmix64(root);
    for b in name.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

pub fn substream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(substream_seed(root, name))
}

/// Cheap stateless hash, used for texture patterns.
pub fn hash64(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x51_7C_C1_B7_27_22_0A_95, |h, &p| splitmix64(h ^ p))
}
