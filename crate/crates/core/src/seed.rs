//! Deterministic sub-seed derivation.

/// Derives an independent sub-seed from a base seed and a stream index
/// (splitmix64 finalizer over the combined words).
pub fn derive(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive2(seed: u64, a: u64, b: u64) -> u64 {
    derive(derive(seed, a), b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_streams() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| derive(42, i)).collect();
        assert_eq!(s.len(), 1000);
        assert_ne!(derive(1, 0), derive(2, 0));
        assert_eq!(derive(5, 9), derive(5, 9));
    }
}
