//! Deterministic seed derivation for all stochastic components.
//!
//! Every consumer of randomness (data generator, noise draws, sampler
//! trajectories, parameter init) owns a private ChaCha stream whose seed is
//! derived from a root seed, a purpose label, and an index. Results are
//! therefore independent of evaluation order, batching, and worker count,
//! and reproduce bit-for-bit under a fixed root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes `(root, purpose, index)` into a single 64-bit seed.
///
/// FNV-1a absorbs the purpose label; the SplitMix64 finalizer then spreads
/// root/index bits so that adjacent indices yield unrelated streams. Pure
/// integer arithmetic, identical on every platform.
pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for &b in purpose.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
    }
    let mut z = h ^ root.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A fresh ChaCha stream for the given purpose and index.
pub fn stream(root: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, purpose, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_purpose_sensitive() {
        let a = derive_seed(7, "noise", 0);
        let b = derive_seed(7, "noise", 0);
        assert_eq!(a, b);
        assert_ne!(derive_seed(7, "noise", 0), derive_seed(7, "noise", 1));
        assert_ne!(derive_seed(7, "noise", 0), derive_seed(7, "init", 0));
        assert_ne!(derive_seed(7, "noise", 0), derive_seed(8, "noise", 0));
    }

    #[test]
    fn streams_with_equal_inputs_coincide() {
        use rand::RngCore;
        let mut r1 = stream(42, "sampler", 3);
        let mut r2 = stream(42, "sampler", 3);
        for _ in 0..16 {
            assert_eq!(r1.next_u64(), r2.next_u64());
        }
    }
}
