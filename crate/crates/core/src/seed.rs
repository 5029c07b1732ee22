//! Deterministic derivation of independent random streams from one master seed.
//!
//! Every consumer draws from ChaCha8 keyed by the master seed, on its own
//! 64-bit stream id `(purpose << 48) | index`. Streams never overlap, so
//! e.g. the shuffle order of epoch 3 is unaffected by how many numbers the
//! initializer consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Subsample = 3,
    Synth = 4,
    GradCheck = 5,
}

/// Random stream for `purpose`; `index` separates e.g. epochs or networks.
pub fn stream(master: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << 48);
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((purpose as u64) << 48) | (index & ((1 << 48) - 1)));
    rng
}
