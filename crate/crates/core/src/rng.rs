//! Seeding helpers shared by every stochastic component.
//!
//! All randomness flows through [`ChaCha8Rng`] so that a `u64` seed pins
//! every draw bit-for-bit across platforms.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer. Used to decorrelate nearby seeds before they are
/// combined with small indices.
pub fn mix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th child stream: `mix(seed) ^ index`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    mix(seed) ^ index
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn child_seeds_of_adjacent_parents_do_not_collide() {
        let a: Vec<u64> = (0..200).map(|i| child_seed(0, i)).collect();
        let b: Vec<u64> = (0..200).map(|i| child_seed(1, i)).collect();
        assert!(a.iter().all(|s| !b.contains(s)));
    }
}
