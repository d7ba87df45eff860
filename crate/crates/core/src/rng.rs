//! Seeded, splittable random streams.
//!
//! Every stream is a xoshiro256++ generator. A stream is identified by a
//! 64-bit seed; the generator state is the SplitMix64 expansion of that
//! seed (`rand_xoshiro`'s `seed_from_u64`). A child stream labelled `L` of a
//! parent with seed `s` has seed `splitmix64(s ^ fnv1a64(L))`, so any
//! implementation can reproduce the same draws from the same labels.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream(seed)
    }

    pub fn seed(self) -> u64 {
        self.0
    }

    pub fn split(self, label: &str) -> SeedStream {
        SeedStream(splitmix64(self.0 ^ fnv1a64(label.as_bytes())))
    }

    pub fn split_index(self, label: &str, index: u64) -> SeedStream {
        SeedStream(splitmix64(self.split(label).0 ^ splitmix64(index)))
    }

    pub fn rng(self) -> Rng {
        Rng::seed_from_u64(self.0)
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
