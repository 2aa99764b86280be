//! Stable seed derivation for per-query and per-component randomness.

use sha2::{Digest, Sha256};

/// Mixes a base seed with a label into an independent 64-bit seed. Stable
/// across platforms and releases.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(base.to_le_bytes())
        .chain_update(label.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
