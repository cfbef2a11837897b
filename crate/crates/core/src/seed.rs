//! Seed derivation shared by every stochastic operation.

use sha2::{Digest, Sha256};

/// First eight bytes of `sha256(base ‖ label ‖ index)`, little-endian.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(1, "a", 2), derive_seed(1, "a", 2));
        assert_ne!(derive_seed(1, "a", 2), derive_seed(1, "b", 2));
        assert_ne!(derive_seed(1, "a", 2), derive_seed(2, "a", 2));
        assert_ne!(derive_seed(1, "ab", 0), derive_seed(1, "a", 0));
    }
}
