//! Master-seed derivation.
//!
//! Every consumer of randomness receives its own stream, derived from the
//! master seed, a purpose tag and an index path. Adding a new consumer never
//! shifts the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named randomness consumers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    Init,
    HeadInit,
    Augment,
    Subsample,
    Split,
    Shuffle,
    Scribble,
    Synth,
    Battery,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x1_0001,
            Purpose::HeadInit => 0x1_0002,
            Purpose::Augment => 0x1_0003,
            Purpose::Subsample => 0x1_0004,
            Purpose::Split => 0x1_0005,
            Purpose::Shuffle => 0x1_0006,
            Purpose::Scribble => 0x1_0007,
            Purpose::Synth => 0x1_0008,
            Purpose::Battery => 0x1_0009,
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a sub-seed from `master`, a purpose and an index path
/// (e.g. `[sample, epoch]`).
pub fn derive_seed(master: u64, purpose: Purpose, path: &[u64]) -> u64 {
    let mut h = mix64(master ^ mix64(purpose.tag()));
    for &p in path {
        h = mix64(h ^ mix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn rng(master: u64, purpose: Purpose, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, purpose, path))
}

/// Stable 64-bit key for a string id.
pub fn id_key(id: &str) -> u64 {
    id.bytes().fold(mix64(id.len() as u64), |h, b| mix64(h ^ u64::from(b)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
