//! Per-component seeds derived from one master seed.
//!
//! `derive_seed(master, label)` is the first 8 bytes (little-endian) of
//! `SHA-256(master.to_le_bytes() || label)`. Components use fixed labels such
//! as `"init"`, `"data"`, `"xe"` and `"rl"`, so each one can be rerun in
//! isolation with the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng_for(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}
