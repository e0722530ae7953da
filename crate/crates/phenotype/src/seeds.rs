//! Deterministic seed fan-out: every randomized stage derives its own seed
//! from the master seed and a fixed tag, so reconfiguring one stage never
//! perturbs another's randomness.

/// FNV-1a over the tag, folded into the base seed.
pub fn derive(base: u64, tag: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in tag.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    base ^ hash
}
