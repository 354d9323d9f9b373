//! Counter-based deterministic random number generation.
//!
//! Every randomized operation in the crate draws from [`StreamRng`], a
//! counter-mode SplitMix64 generator. The i-th output is
//! `mix64(key + (i+1) * GOLDEN)` where `mix64` is the SplitMix64 finalizer
//! and `GOLDEN` is 2^64/phi. Because output depends only on `(key, i)`,
//! streams can be split hierarchically — per episode, per image, per
//! pipeline stage — and each substream is reproducible across runs and
//! platforms regardless of evaluation order.
//!
//! Normal deviates use the Box–Muller transform (cosine branch) on top of
//! the integer stream, so they inherit the same reproducibility.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const SPLIT_SALT: u64 = 0xD1B5_4A32_D192_ED03;
const TWO_POW_53: f64 = 9_007_199_254_740_992.0;

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags used when deriving substreams for pipeline stages.
pub mod stream {
    pub const EPISODE: u64 = 1;
    pub const IMAGE: u64 = 2;
    pub const FG_STYLE: u64 = 3;
    pub const GLOBAL_STYLE: u64 = 4;
    pub const BACKBONE: u64 = 5;
    pub const HSM_WEIGHTS: u64 = 6;
    pub const SHAPE: u64 = 7;
    pub const TEXTURE: u64 = 8;
    pub const ATTEMPT: u64 = 9;
}

/// Counter-mode SplitMix64 stream.
#[derive(Clone, Debug)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    /// Root stream for a 64-bit seed.
    pub fn from_seed(seed: u64) -> Self {
        StreamRng { key: mix64(seed ^ GOLDEN), counter: 0 }
    }

    /// Derive an independent child stream. Children depend only on the
    /// parent key and the tag, never on how far the parent has advanced.
    pub fn split(&self, tag: u64) -> Self {
        StreamRng {
            key: mix64(self.key.wrapping_add(GOLDEN.wrapping_mul(tag ^ SPLIT_SALT))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / TWO_POW_53
    }

    /// Uniform integer in [0, n). n must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Normal deviate via Box–Muller, cosine branch.
    /// Consumes exactly two integer draws.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        // u1 in (0, 1] keeps ln finite; u2 in [0, 1).
        let u1 = ((self.next_u64() >> 11) + 1) as f64 / TWO_POW_53;
        let u2 = (self.next_u64() >> 11) as f64 / TWO_POW_53;
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        mean + std * z
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = StreamRng::from_seed(7);
        let mut b = StreamRng::from_seed(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    // Frozen outputs: the generator is a documented contract, and every
    // seeded artifact in the crate depends on these exact values.
    #[test]
    fn golden_values_pin_the_algorithm() {
        let mut r = StreamRng::from_seed(0);
        assert_eq!(r.next_u64(), 0xa706_dd2f_4d19_7e6f);
        assert_eq!(r.next_u64(), 0xb382_a305_f441_4f5e);
        assert_eq!(r.next_u64(), 0x631a_9154_fbab_f717);
        let mut child = StreamRng::from_seed(0).split(7);
        assert_eq!(child.next_u64(), 0x5275_b76a_dbd0_29c5);
        let mut n = StreamRng::from_seed(123);
        assert_eq!(n.uniform(), 7.722_061_704_912_069_89e-1);
        assert_eq!(n.normal(0.0, 1.0), 1.877_345_717_300_104_02e-1);
    }

    #[test]
    fn split_is_order_independent() {
        let root = StreamRng::from_seed(3);
        let mut advanced = root.clone();
        for _ in 0..17 {
            advanced.next_u64();
        }
        let mut child_a = root.split(42);
        let mut child_b = advanced.split(42);
        assert_eq!(child_a.next_u64(), child_b.next_u64());
    }

    #[test]
    fn split_tags_decorrelate() {
        let root = StreamRng::from_seed(3);
        assert_ne!(root.split(1).next_u64(), root.split(2).next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = StreamRng::from_seed(11);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn below_in_range_and_covers() {
        let mut rng = StreamRng::from_seed(5);
        let mut seen = [false; 7];
        for _ in 0..1_000 {
            let v = rng.below(7) as usize;
            assert!(v < 7);
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn normal_moments_roughly_match() {
        let mut rng = StreamRng::from_seed(23);
        let n = 50_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 0.25)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 0.0625).abs() < 0.005, "var {var}");
    }

    #[test]
    fn zero_std_is_exactly_mean() {
        let mut rng = StreamRng::from_seed(1);
        assert_eq!(rng.normal(0.0, 0.0), 0.0);
        assert_eq!(rng.normal(1.5, 0.0), 1.5);
    }
}
