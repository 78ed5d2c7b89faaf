//! Keyed random streams.
//!
//! Every random draw in the lab comes from a ChaCha8 generator keyed by a
//! 64-bit seed and a 64-bit stream id. ChaCha is counter based, so distinct
//! stream ids give independent sequences and any shard of a workload can be
//! regenerated without replaying the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags folded into stream ids so that workloads never share data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Domain {
    Plain = 0,
    Train = 1,
    Eval = 2,
    Finetune = 3,
    Skew = 4,
    Init = 5,
}

/// Sub-stream selector within one block of generated data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Part {
    Symbols = 0,
    Noise = 1,
}

/// A (seed, stream) pair identifying one reproducible random sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub stream: u64,
}

impl StreamKey {
    pub const fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Key for block `index` of `domain`, restricted to `part`.
    pub fn block(seed: u64, domain: Domain, index: u64, part: Part) -> Self {
        debug_assert!(index < 1 << 48);
        let stream = (domain as u64) << 56 | (part as u64) << 48 | (index & ((1 << 48) - 1));
        Self { seed, stream }
    }

    /// Same block, other part.
    pub fn with_part(self, part: Part) -> Self {
        let stream = self.stream & !(0xff << 48) | (part as u64) << 48;
        Self { seed: self.seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

impl From<u64> for StreamKey {
    fn from(seed: u64) -> Self {
        Self::new(seed, 0)
    }
}

/// Derives an independent seed from `seed` and a tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
