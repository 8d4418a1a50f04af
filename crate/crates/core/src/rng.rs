//! Replayable counter-based random substreams.
//!
//! Every stochastic site derives its own ChaCha stream from a list of
//! integer coordinates (experiment hash, iteration, slot, ...), so any
//! cell of the experiment matrix can be replayed in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Slot ids keeping the per-iteration substreams distinct.
pub mod slot {
    pub const QUANT_ENT: u64 = 0;
    pub const QUANT_DEC: u64 = 1;
    pub const DATA: u64 = 2;
    pub const INIT: u64 = 3;
}

pub fn substream(parts: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Stable 64-bit hash of a string (used to key experiment configs).
pub fn hash64(s: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(s.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
