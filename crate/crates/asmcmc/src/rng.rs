//! Reproducible random streams.
//!
//! Every sampler, replicate and helper draws from a [`RngStream`], a
//! `(seed, stream)` pair mapped onto ChaCha12's independent stream space.
//! Equal pairs give bit-identical draw sequences; distinct streams are
//! independent, so replicates can run concurrently without coordination.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Identifies one reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// A generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Derive a child stream. Mixing keeps children of different parents
    /// distinct even when `child` indices collide.
    pub fn substream(&self, child: u64) -> Self {
        let mixed = splitmix64(self.stream ^ splitmix64(child.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        Self {
            seed: self.seed,
            stream: mixed,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
