//! Named random substreams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Seed for the substream `purpose` of `master`. Stable across releases:
/// the first 8 bytes of SHA-256 over the little-endian seed and the label.
pub fn substream_seed(master: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn substream(master: u64, purpose: &str) -> Rng {
    Rng::seed_from_u64(substream_seed(master, purpose))
}

/// Seed of the substream keyed by a purpose plus integer indices, e.g.
/// (iteration, candidate).
pub fn indexed_seed(master: u64, purpose: &str, idx: &[u64]) -> u64 {
    let mut label = String::from(purpose);
    for i in idx {
        label.push('/');
        label.push_str(&i.to_string());
    }
    substream_seed(master, &label)
}

pub fn indexed(master: u64, purpose: &str, idx: &[u64]) -> Rng {
    Rng::seed_from_u64(indexed_seed(master, purpose, idx))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
