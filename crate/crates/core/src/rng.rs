//! Counter-based random streams.
//!
//! Every unit of simulation work (a Monte Carlo replication, a bootstrap
//! replicate inside it) owns a stream derived from its position in the
//! experiment tree, so results never depend on how rayon schedules work.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// A node in the tree of random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    seed: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64) -> Self {
        Self {
            seed: splitmix64(master_seed ^ 0x5bd1_e995_d6e8_feb8),
        }
    }

    /// Key for the `index`-th child of this node.
    pub fn child(&self, index: u64) -> Self {
        Self {
            seed: splitmix64(self.seed ^ splitmix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15))),
        }
    }

    pub fn rng(&self) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
