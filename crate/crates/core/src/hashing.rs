//! Content hashing helpers. All hashes are lowercase hex SHA-256.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the compact key-sorted JSON encoding of `value`.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let sorted = serde_json::to_value(value).expect("serializable value");
    sha256_hex(&serde_json::to_vec(&sorted).expect("serializable value"))
}

/// Key-sorted pretty JSON with a trailing newline; the on-disk form of every
/// document we write. Routing through `Value` sorts object keys.
pub fn canonical_json<T: Serialize>(value: &T) -> crate::Result<String> {
    let sorted = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&sorted)?;
    s.push('\n');
    Ok(s)
}
