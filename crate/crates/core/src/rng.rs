//! Seed hierarchy.
//!
//! Every random draw in a run is taken from a ChaCha8 generator keyed by
//! `(run seed, step, item)` and a per-purpose stream number, so encoder
//! masks, decoder masks and visibility matrices for one sentence never share
//! draws, and results do not depend on the order in which batch elements are
//! processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a generator is used for. Each purpose gets its own ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Batch = 2,
    EncoderMask = 3,
    DecoderMask = 4,
    Visibility = 5,
    Pairs = 6,
    Fixture = 7,
    Simulation = 8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, purpose: Purpose, step: u64, item: u64) -> ChaCha8Rng {
        let key = splitmix64(splitmix64(splitmix64(self.seed) ^ step) ^ item);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(purpose as u64);
        rng
    }
}
