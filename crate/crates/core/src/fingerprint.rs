//! Content fingerprints used for cache keys and mock lookups.

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Fingerprint of a prompt: SHA-256 over its UTF-8 bytes.
pub fn prompt_fingerprint(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}
