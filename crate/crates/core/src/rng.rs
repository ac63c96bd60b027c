//! Deterministic RNG streams.
//!
//! All randomness in the crate flows from a single master seed through named
//! streams: `stream(master, "train")`, `stream(master, "ordering", i)`, etc.
//! Streams are independent ChaCha8 generators, so concurrent consumers (curve
//! orderings, noise runs, per-example noise) never share mutable RNG state and
//! results do not depend on scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit hash of a label (FNV-1a). Not cryptographic; only needs to
/// be platform-independent and fixed forever.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(master, label)`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ fnv1a(label.as_bytes()))
}

/// Derive a child seed from `(master, label, index)`, for indexed families of
/// streams (orderings, runs, examples).
pub fn derive_seed_indexed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, label) ^ splitmix64(index))
}

/// A named RNG stream.
pub fn stream(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

/// An indexed RNG stream.
pub fn stream_indexed(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(master, label, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(42, "train");
        let mut b = stream(42, "train");
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn labels_separate_streams() {
        let mut a = stream(42, "train");
        let mut b = stream(42, "init");
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn indices_separate_streams() {
        let mut a = stream_indexed(42, "ordering", 0);
        let mut b = stream_indexed(42, "ordering", 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
