//! Seeded random streams. Every stochastic step derives its own ChaCha
//! stream from a base seed and a stream label so results do not depend on
//! iteration order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with any number of stream labels.
pub fn sub_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn stream(seed: u64, labels: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, labels))
}
