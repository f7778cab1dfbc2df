//! Seeded random streams.
//!
//! All randomness comes from ChaCha20 generators keyed by a 64-bit seed.
//! Independent streams (per replicate, per setting) are derived by hashing the
//! master seed together with integer tags, so results do not depend on the
//! order in which parallel work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha20Rng;

pub fn from_seed(seed: u64) -> Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Deterministic child seed for `(master, tags…)`.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

pub fn stream(master: u64, tags: &[u64]) -> Rng {
    from_seed(derive_seed(master, tags))
}
