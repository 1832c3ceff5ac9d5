//! Named seed derivation.
//!
//! Every random stream in the pipeline is derived from one base seed, a
//! component label, and an index, so any sub-computation can be reproduced
//! in isolation and results never depend on evaluation order.

/// Derive a child seed from `(base, label, index)`.
///
/// FNV-1a over the label bytes, mixed with the base and index through a
/// splitmix64 finalizer. Stable across platforms and versions.
pub fn derive(base: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix(splitmix(base ^ h).wrapping_add(index))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_label_sensitive() {
        assert_eq!(derive(0, "fold", 3), derive(0, "fold", 3));
        assert_ne!(derive(0, "fold", 3), derive(0, "fold", 4));
        assert_ne!(derive(0, "fold", 3), derive(0, "tree", 3));
        assert_ne!(derive(0, "fold", 3), derive(1, "fold", 3));
    }
}
