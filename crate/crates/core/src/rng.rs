//! Deterministic random streams.
//!
//! Every random decision in the crate (initialization, shuffling, dropout
//! masks, seed derivation, bootstrap resampling) goes through
//! [`StreamRng`]: xoshiro256** whose 256-bit state is expanded from a `u64`
//! with SplitMix64. Integer draws use an unbiased widening-multiply with
//! rejection and unit floats take the top 53 bits, so the streams are
//! reproducible by any implementation that follows the same recipe.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

/// Fixed stream offsets for the per-run fan-out of a training seed.
pub mod streams {
    pub const INIT: u32 = 0;
    pub const STAGE1_SHUFFLE: u32 = 1;
    pub const STAGE1_DROPOUT: u32 = 2;
    pub const FT_SHUFFLE: u32 = 3;
    pub const REPLAY_SHUFFLE: u32 = 4;
    pub const FT_DROPOUT: u32 = 5;
    pub const HEAD_INIT: u32 = 6;
    pub const REPLAY_DROPOUT: u32 = 7;
}

/// SplitMix64 output function; a bijection on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct StreamRng {
    inner: Xoshiro256StarStar,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Stream `index` of `seed`: the base generator advanced by `index`
    /// jumps of 2^128 draws, so streams never overlap.
    pub fn stream(seed: u64, index: u32) -> Self {
        let mut inner = Xoshiro256StarStar::seed_from_u64(seed);
        for _ in 0..index {
            inner.jump();
        }
        Self { inner }
    }

    /// Generator for counter `counter` under `key`, independent of how many
    /// other counters have been visited. Used for schedule-free parallel
    /// bootstrap rounds.
    pub fn keyed(key: u64, counter: u64) -> Self {
        Self::new(mix64(key ^ mix64(counter.wrapping_add(0x9E37_79B9_7F4A_7C15))))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Fisher-Yates from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Identity permutation of `0..n`, shuffled.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
