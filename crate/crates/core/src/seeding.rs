//! Purpose-keyed deterministic RNG streams.
//!
//! Every random draw in the toolkit flows from a single `u64` seed plus a
//! purpose string (e.g. `"train/epoch3/scene/s07"`). Streams for distinct
//! purposes are independent, so concurrent consumers and replay oracles see
//! identical draws regardless of evaluation order.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream from `(seed, purpose)`.
pub fn stream(seed: u64, purpose: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
