//! Reproducible random streams.
//!
//! Particles are grouped into fixed-size blocks. Every block draws from its own
//! ChaCha8 stream, keyed by `(root seed, epoch)` for the key and the block index
//! for the stream id. Since ChaCha is counter based, the numbers a block sees do not
//! depend on which worker runs it or in what order, so results are identical for
//! any worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Number of particles sharing one random stream.
pub const BLOCK_SIZE: usize = 1024;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for a named sub-task (experiment id, initialization, point index, ...).
pub fn derive_seed(root: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the root.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(root ^ splitmix64(h))
}

/// Where an ensemble's randomness comes from: the root seed and how many
/// evolution stages have consumed streams so far.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedLineage {
    pub root: u64,
    pub epoch: u64,
}

impl SeedLineage {
    pub fn new(root: u64) -> Self {
        Self { root, epoch: 0 }
    }

    /// Lineage for the next stage; each stage gets fresh, non-overlapping streams.
    pub fn advance(self) -> Self {
        Self {
            root: self.root,
            epoch: self.epoch + 1,
        }
    }

    pub fn block_rng(&self, block: u64) -> ChaCha8Rng {
        let key = splitmix64(self.root ^ splitmix64(self.epoch.wrapping_add(0x5eed)));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(block);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let l = SeedLineage::new(7);
        let a: Vec<u64> = (0..4).map(|_| l.block_rng(3).random()).collect();
        let mut r = l.block_rng(3);
        let b: Vec<u64> = (0..4).map(|_| r.random()).collect();
        assert_ne!(a, b); // each call restarts the stream, so a is four copies of the first draw
        assert!(a.iter().all(|&v| v == b[0]));
        let other: u64 = l.block_rng(4).random();
        assert_ne!(other, b[0]);
        let next: u64 = l.advance().block_rng(3).random();
        assert_ne!(next, b[0]);
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }
}
