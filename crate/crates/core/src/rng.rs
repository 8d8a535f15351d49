//! Keyed random streams.
//!
//! Every draw in a simulation comes from a stream addressed by
//! `(seed, purpose, step, index)`. A stream is a fresh xoshiro256++ generator
//! whose state is a hash of that address, so the value of a draw never depends
//! on which worker produced it or in what order streams were opened.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Stream = Xoshiro256PlusPlus;

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Jump = 2,
    Drift = 3,
    Diffusion = 4,
    Gate = 5,
    Projection = 6,
    Subsample = 7,
    Auxiliary = 8,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamKey {
    seed: u64,
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: Purpose, step: u64, index: u64) -> Stream {
        let mut h = splitmix(self.seed);
        h = splitmix(h ^ purpose as u64);
        h = splitmix(h ^ step);
        h = splitmix(h ^ index);
        Xoshiro256PlusPlus::seed_from_u64(h)
    }
}
