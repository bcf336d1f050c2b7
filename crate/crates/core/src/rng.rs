//! Keyed random streams: every (seed, key...) tuple gets an independent
//! ChaCha stream, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn keyed_rng(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for k in key {
        h.update(k.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}
