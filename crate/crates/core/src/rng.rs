//! Keyed deterministic random streams.
//!
//! Every stochastic draw in the pipeline (initialization, fold assignment,
//! masking, pseudo-bag shuffles, epoch order) comes from a ChaCha stream
//! whose key is a SHA-256 digest of the global seed and a list of labels.
//! Streams keyed by distinct labels are independent, so the result of one
//! slide's draw never depends on how many draws happened before it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// One component of a stream key.
#[derive(Debug, Clone, Copy)]
pub enum KeyPart<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for KeyPart<'a> {
    fn from(s: &'a str) -> Self {
        KeyPart::Str(s)
    }
}

impl From<u64> for KeyPart<'_> {
    fn from(v: u64) -> Self {
        KeyPart::Int(v)
    }
}

pub fn stream(seed: u64, parts: &[KeyPart<'_>]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"sammil.rng.v1");
    hasher.update(seed.to_le_bytes());
    for part in parts {
        match part {
            KeyPart::Str(s) => {
                hasher.update([0u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
            KeyPart::Int(v) => {
                hasher.update([1u8]);
                hasher.update(v.to_le_bytes());
            }
        }
    }
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Derive a child seed, for handing a seed down to an API that takes `u64`.
pub fn derive_seed(seed: u64, parts: &[KeyPart<'_>]) -> u64 {
    use rand::RngCore;
    stream(seed, parts).next_u64()
}
