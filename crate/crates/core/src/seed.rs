//! Deterministic seed derivation.
//!
//! Every random draw in the crate flows through a ChaCha8 stream keyed by a
//! seed derived here, so a whole run is a pure function of one base seed.
//! Derivation is a SplitMix64 finalizer over `base + GAMMA * (stream + 1)`:
//! cheap, stateless, and well mixed for sequential stream ids.

use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `base` for the given stream id.
///
/// Distinct `(base, stream)` pairs map to distinct-looking seeds; the same
/// pair always maps to the same seed. `stream + 1` keeps stream 0 from
/// collapsing to a plain hash of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix64(base.wrapping_add(GAMMA.wrapping_mul(stream.wrapping_add(1))))
}

/// Fixed RNG for everything downstream of a derived seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws from (0, 1]: the complement of the half-open `random::<f64>()`
/// range, so initialized factors are never exactly zero.
pub fn unit_open_closed(rng: &mut ChaCha8Rng) -> f64 {
    1.0 - rng.random::<f64>()
}

/// `0..n` permuted by a seeded Fisher-Yates shuffle.
///
/// The loop is pinned (descending `i`, `j = random_range(0..=i)`, swap) so
/// that membership of any given permutation can be replayed independently.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}
