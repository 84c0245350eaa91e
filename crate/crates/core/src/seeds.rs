//! Counter-based expansion of one user seed into independent per-task streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for task `stream` under `seed`. Distinct streams never overlap,
/// so results do not depend on the order in which tasks run.
pub fn task_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed from a parent seed and a label, for nesting task hierarchies.
pub fn child_seed(seed: u64, label: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
