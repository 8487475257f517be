//! SHA-256 helpers for content hashes recorded in artifacts.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_lower(&Sha256::digest(bytes))
}

pub(crate) fn hex_lower(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a list of token sequences, independent of in-memory layout.
pub fn token_corpus_hash(seqs: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    h.update((seqs.len() as u64).to_le_bytes());
    for s in seqs {
        h.update((s.len() as u64).to_le_bytes());
        for &t in s {
            h.update((t as u32).to_le_bytes());
        }
    }
    hex_lower(&h.finalize())
}
