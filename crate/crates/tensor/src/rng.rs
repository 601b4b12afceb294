//! Named, independently seeded random streams.
//!
//! A stream is a ChaCha8 generator keyed by `(seed, name)`, so any
//! stochastic step can be replayed without threading generator state
//! through the program.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let h = fnv1a(name.as_bytes());
        let mut key = [0u8; 32];
        let mut state = self.seed ^ h.rotate_left(29);
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state ^ h);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }

    /// A child whose streams are disjoint from the parent's.
    pub fn child(&self, name: &str) -> RngStreams {
        RngStreams::new(splitmix64(self.seed ^ fnv1a(name.as_bytes())))
    }
}

pub fn standard_normal<R: Real>(rng: &mut impl rand::Rng, n: usize) -> Vec<R> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            R::of(z)
        })
        .collect()
}
