use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Serialises `value` with object keys sorted and no whitespace.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps objects in a BTreeMap, so keys come out sorted
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(canonical_json(value)?.as_bytes())))
}
