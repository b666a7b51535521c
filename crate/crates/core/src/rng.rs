//! Per-image random streams.
//!
//! Every stream is keyed on `(seed, image_id, purpose)` and hashed into a
//! ChaCha seed, so the draws an image sees never depend on which worker
//! processed it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Purpose tags. Each pipeline stage draws from its own stream so that
/// swapping one stage (e.g. candidate selection) leaves the others untouched.
pub mod purpose {
    pub const DECIDE: &str = "decide";
    pub const PROPOSE: &str = "propose";
    pub const SCORE: &str = "score";
    pub const CLASS: &str = "class";
    pub const MATCH: &str = "match";
    pub const BLEND: &str = "blend";
    pub const ENLARGE: &str = "enlarge";
    pub const CONTEXT: &str = "context";
    pub const WEAK: &str = "weak";
    pub const SPLIT: &str = "split";
}

pub fn stream(seed: u64, image_id: &str, purpose: &str) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((image_id.len() as u64).to_le_bytes());
    h.update(image_id.as_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// Sub-stream for the `index`-th item handled under one purpose.
pub fn substream(seed: u64, image_id: &str, purpose: &str, index: u64) -> StreamRng {
    stream(seed, image_id, &format!("{purpose}#{index}"))
}
