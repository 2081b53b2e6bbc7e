//! Deterministic random streams.
//!
//! Every consumer of randomness names its stream, so adding a new consumer
//! never shifts the draws seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Returns the generator for `(seed, stream)`.
///
/// The 256-bit ChaCha key is the SHA-256 of the little-endian seed followed by
/// the stream label, so the sequence is identical on every platform.
pub fn seeded_rng(seed: u64, stream: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(stream.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(digest.as_slice());
    ChaCha8Rng::from_seed(key)
}
