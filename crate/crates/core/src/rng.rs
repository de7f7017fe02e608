//! Seeded random streams.
//!
//! All randomness comes from xoshiro256++ seeded through SplitMix64
//! (`seed_from_u64`). Independent streams are derived from a base seed and a
//! list of stream coordinates (for example `[AUGMENT, epoch, sample]`), so a
//! draw never depends on how many draws other streams consumed.
//!
//! Draw conventions:
//! - [`Rng::next_f64`] takes one `u64` and keeps its top 53 bits: `(x >> 11) * 2^-53`.
//! - [`Rng::below`] takes `u64` draws and rejects values in the biased tail
//!   (`x >= 2^64 - 2^64 mod n`), returning `x mod n`.

use rand_core::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Stream tags used to derive independent generators from one seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const GRADCHECK: u64 = 5;
    pub const SPLIT: u64 = 6;
}

#[derive(Debug, Clone)]
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Generator for the stream identified by `coords` under `seed`.
    ///
    /// The coordinates are folded into a single 64-bit seed with the
    /// SplitMix64 finalizer, one coordinate at a time.
    pub fn stream(seed: u64, coords: &[u64]) -> Self {
        let mut folded = splitmix_finalize(seed);
        for &c in coords {
            folded = splitmix_finalize(folded ^ splitmix_finalize(c.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        Rng::from_seed(folded)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below: n must be positive");
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % n;
            }
        }
    }

    /// In-place Fisher-Yates shuffle: for `i` from `len-1` down to 1, swap
    /// element `i` with element `below(i+1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
