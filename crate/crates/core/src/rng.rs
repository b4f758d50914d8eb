//! Seed derivation for isolated, reproducible random streams.
//!
//! Every stochastic component draws from its own ChaCha stream keyed by a
//! master seed and a small tuple of coordinates (client, round, purpose, ...),
//! so the order in which workers run never changes a realization.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// Purpose tags keep streams for different stages disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Noise = 1,
    Selection = 2,
    LoraInit = 3,
    LocalShuffle = 4,
    Synthetic = 5,
    CodecInit = 6,
    CodecBatch = 7,
    Task = 8,
    Fuzz = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a purpose tag and coordinates into a stream seed.
pub fn derive_seed(master: u64, purpose: Purpose, coords: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ (purpose as u64).rotate_left(32));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c));
    }
    h
}

pub fn stream(master: u64, purpose: Purpose, coords: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, purpose, coords))
}
