//! SHA-256 helpers shared by content ids, cache keys and manifests.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash a sequence of fields with length prefixes so that field boundaries
/// cannot be shifted to produce a collision.
pub fn sha256_fields<I, B>(fields: I) -> String
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for f in fields {
        let f = f.as_ref();
        hasher.update((f.len() as u64).to_le_bytes());
        hasher.update(f);
    }
    hex::encode(hasher.finalize())
}

pub fn sha256_json<T: Serialize + ?Sized>(value: &T) -> String {
    // serde_json emits struct fields in declaration order and maps from
    // BTreeMap in key order, so this is stable for the types we hash.
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&bytes)
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// 32 raw digest bytes, used to seed deterministic RNGs.
pub fn seed_bytes<I, B>(fields: I) -> [u8; 32]
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for f in fields {
        let f = f.as_ref();
        hasher.update((f.len() as u64).to_le_bytes());
        hasher.update(f);
    }
    let mut out = [0u8; 32];
    out.copy_from_slice(&hasher.finalize());
    out
}

/// Map a digest onto [0, 1) using its first 8 bytes.
pub fn unit_interval<I, B>(fields: I) -> f64
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let bytes = seed_bytes(fields);
    let mut head = [0u8; 8];
    head.copy_from_slice(&bytes[..8]);
    (u64::from_le_bytes(head) >> 11) as f64 / (1u64 << 53) as f64
}
