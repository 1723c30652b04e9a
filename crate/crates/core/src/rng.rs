//! Reproducible random streams.
//!
//! Every stream is a ChaCha20 generator whose key is derived from a master
//! seed and a path of integers (domain tag, trial index, sensor index, ...).
//! Streams for different paths are independent, so results never depend on
//! the order in which parallel tasks run.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha20Rng;

/// Domain tags separating the uses of a master seed.
pub mod domain {
    pub const PLANT: u64 = 1;
    pub const TRIGGER: u64 = 2;
    pub const RANDOM_SCHEDULE: u64 = 3;
    pub const SCENARIO: u64 = 4;
    pub const TRIAL: u64 = 5;
    pub const ORACLE: u64 = 6;
}

pub fn derive(master: u64, path: &[u64]) -> Stream {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let seed: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(seed)
}
