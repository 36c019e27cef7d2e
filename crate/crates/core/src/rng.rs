//! Seeded random substreams.
//!
//! Every random draw in a simulation comes from a `ChaCha8Rng` keyed by the
//! run seed plus a purpose tag and a few integer coordinates (client id,
//! task, round, ...). Two draws with the same key see the same stream no
//! matter which thread or in which order they run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SimRng = ChaCha8Rng;

/// What a substream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    ClassOrder = 2,
    Assignment = 3,
    ModelInit = 4,
    Widen = 5,
    Encoder = 6,
    Selection = 7,
    LocalTraining = 8,
    Perturbation = 9,
    PoolShuffle = 10,
    Reconstruction = 11,
    Augmentation = 12,
    ClientData = 13,
    Test = 99,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from the run seed, a purpose and coordinates.
pub fn derive_key(seed: u64, purpose: Purpose, coords: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(purpose as u64));
    for &c in coords {
        h = splitmix(h ^ splitmix(c.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

pub fn substream(seed: u64, purpose: Purpose, coords: &[u64]) -> SimRng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, purpose, coords))
}

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[inline]
pub fn standard_normal(rng: &mut SimRng) -> f64 {
    StandardNormal.sample(rng)
}
