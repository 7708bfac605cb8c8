//! Seed derivation. Every stage draws its randomness from the root seed
//! mixed with a fixed label, so adding a stage never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a stage seed from the root seed and a stage label.
pub fn derive(root: u64, label: &str) -> u64 {
    splitmix64(root ^ fnv1a(label.as_bytes()))
}

/// Deterministic generator for `seed`.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic generator for the stage `label` under `root`.
pub fn stage_rng(root: u64, label: &str) -> ChaCha8Rng {
    rng(derive(root, label))
}
