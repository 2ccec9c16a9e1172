//! Stable, platform-independent hashing used for seeds and content digests.

use sha2::{Digest, Sha256};

/// Hashes a sequence of byte fields into a `u64`.
///
/// Each field is length-prefixed so `["ab", "c"]` and `["a", "bc"]` differ.
pub fn stable_hash(fields: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for field in fields {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

/// Seed of one augmentation task, derived from the run seed and the task identity.
pub fn task_seed(global_seed: u64, image_id: &str, replica_idx: u32) -> u64 {
    stable_hash(&[
        b"task",
        &global_seed.to_le_bytes(),
        image_id.as_bytes(),
        &replica_idx.to_le_bytes(),
    ])
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
