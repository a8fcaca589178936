use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Deterministic RNG used everywhere randomness is needed.
///
/// ChaCha8 keyed from a `u64` gives identical streams across platforms, which
/// the bit-level determinism contracts depend on. `fork` derives an
/// independent stream so that unrelated consumers (init, shuffling,
/// augmentation) cannot perturb each other's draws.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> SeededRng {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derives an independent stream from `seed` and a purpose tag.
    pub fn derive(seed: u64, tag: u64) -> SeededRng {
        // splitmix64 over the combined value; decorrelates nearby seeds.
        let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        SeededRng::new(z ^ (z >> 31))
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        if lo == hi {
            return lo;
        }
        self.inner.random_range(lo..hi)
    }

    pub fn normal(&mut self, mean: f32, std: f32) -> f32 {
        if std == 0.0 {
            return mean;
        }
        Normal::new(mean, std).unwrap().sample(&mut self.inner)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bool(&mut self, p: f64) -> bool {
        self.inner.random_bool(p)
    }

    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        slice.shuffle(&mut self.inner);
    }

    pub fn fill_uniform(&mut self, out: &mut [f32], lo: f32, hi: f32) {
        for v in out {
            *v = self.uniform(lo, hi);
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f32], mean: f32, std: f32) {
        if std == 0.0 {
            out.fill(mean);
            return;
        }
        let dist = Normal::new(mean, std).unwrap();
        for v in out {
            *v = dist.sample(&mut self.inner);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        for _ in 0..32 {
            assert_eq!(a.uniform(-1.0, 1.0).to_bits(), b.uniform(-1.0, 1.0).to_bits());
        }
    }

    #[test]
    fn derived_streams_differ_by_tag() {
        let mut a = SeededRng::derive(7, 1);
        let mut b = SeededRng::derive(7, 2);
        let va: Vec<u32> = (0..8).map(|_| a.uniform(0.0, 1.0).to_bits()).collect();
        let vb: Vec<u32> = (0..8).map(|_| b.uniform(0.0, 1.0).to_bits()).collect();
        assert_ne!(va, vb);
    }
}
