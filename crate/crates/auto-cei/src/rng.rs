//! Deterministic random streams.
//!
//! Every stochastic draw in the pipeline comes from a ChaCha stream keyed by
//! the run seed plus a structured path (purpose, round, task id, draw index).
//! Streams are independent of scheduling, so results are identical whether a
//! batch is sampled by one worker or eight.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives the stream keyed by `seed` and `path`.
pub fn stream(seed: u64, path: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in path {
        // Length-prefix each part so ["ab", "c"] and ["a", "bc"] differ.
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Hex-encoded SHA-256 over the concatenation of `parts`.
pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        write!(out, "{byte:02x}").expect("writing to string cannot fail");
    }
    out
}
