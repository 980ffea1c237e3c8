//! Deterministic RNG substreams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream derived
//! from the run seed plus a purpose label, so independent pipeline stages
//! never contend for one shared stream and any stage can be replayed alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, stable across platforms. Good enough to separate label streams.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG for a named substream of `seed`. Streams with different labels are
/// independent; the same (seed, label) pair always yields the same stream.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&(label.len() as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Substream additionally keyed by an index (epoch number, prompt number).
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(&(label.len() as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
