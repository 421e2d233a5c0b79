//! Seeded randomness.
//!
//! Every random draw comes from ChaCha8. A stream is built by
//! `ChaCha8Rng::seed_from_u64(seed)` (which expands the 64-bit seed with
//! PCG32, as documented by `rand_core`) followed by `set_stream(substream)`.
//! The substream ids below are fixed so a run seed always maps to the same
//! draws on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named substreams derived from a single run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Substream {
    Sampling = 1,
    DemoOrder = 2,
    Modulator = 3,
    Mock = 4,
    Synthetic = 5,
}

pub fn stream(seed: u64, substream: Substream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(substream as u64);
    rng
}

/// Stream keyed by arbitrary bytes, used where a draw must depend on content
/// (e.g. the mock backend's per-prompt noise).
pub fn keyed_stream(seed: u64, key: &[u8]) -> ChaCha8Rng {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key);
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
