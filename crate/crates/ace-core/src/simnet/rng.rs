//! Seeded randomness. Every actor draws from its own stream derived from the
//! root seed and a stable label, so the full event trace is a pure function of
//! the root seed regardless of how many actors exist or in which order they
//! are created.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, fixed here rather than taken from `std` so stream derivation never
/// changes underneath us.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a stream seed from the root seed and a stable label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + label.len());
    buf.extend_from_slice(&root.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    fnv1a64(&buf)
}

/// A fresh deterministic RNG stream for `label`.
pub fn stream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

/// Deterministic uniform in `[0,1)` from a hash of `(root, label, n)`.
/// Used where a value must be a pure function of an identifier rather than of
/// draw order, e.g. per-item verdicts that must be reproducible post-hoc.
pub fn unit_hash(root: u64, label: &str, n: u64) -> f64 {
    let mut buf = Vec::with_capacity(16 + label.len());
    buf.extend_from_slice(&root.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    let h = fnv1a64(&buf);
    // 53 significant bits into [0,1)
    (h >> 11) as f64 / (1u64 << 53) as f64
}
