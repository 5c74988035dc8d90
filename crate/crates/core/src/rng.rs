//! Counter-based pseudo-random numbers with portable Gaussian sampling.
//!
//! Every random value in this crate is a pure function of `(seed, counter)`:
//! the generator hashes the counter through the SplitMix64 finalizer, so any
//! element of any stream can be computed independently and in parallel, and
//! two runs with the same seed are bit-identical. Gaussian samples use the
//! Box-Muller transform with `ln`/`cos` from the pure-Rust `libm` crate
//! rather than the platform libm, keeping the output stable across targets.

/// Weyl increment for the counter walk (golden-ratio constant).
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string, used to derive per-key substreams.
#[inline]
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A random-access stream of values derived from a 64-bit seed.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed }
    }

    /// Substream for a named entity (e.g. a tensor key). Streams for
    /// different names are independent of which other names exist.
    pub fn substream(seed: u64, name: &str) -> Self {
        CounterRng {
            seed: seed ^ fnv1a64(name.as_bytes()),
        }
    }

    /// The `counter`-th raw 64-bit value of the stream.
    #[inline]
    pub fn value(&self, counter: u64) -> u64 {
        mix64(
            self.seed
                .wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)),
        )
    }

    /// Uniform in the half-open interval (0, 1]. The open lower end keeps
    /// `ln(u)` finite for Box-Muller.
    #[inline]
    pub fn uniform(&self, counter: u64) -> f64 {
        ((self.value(counter) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// The `index`-th standard normal sample of the stream.
    ///
    /// Each sample consumes two counters (2*index, 2*index+1) and keeps only
    /// the cosine branch of the Box-Muller pair, so samples are individually
    /// addressable.
    #[inline]
    pub fn gaussian(&self, index: u64) -> f64 {
        let u1 = self.uniform(2 * index);
        let u2 = self.uniform(2 * index + 1);
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_stream_is_deterministic() {
        let a = CounterRng::new(42);
        let b = CounterRng::new(42);
        for i in 0..64 {
            assert_eq!(a.value(i), b.value(i));
        }
    }

    // First raw outputs for seed 0, frozen so any change to the generator
    // definition is caught rather than silently shifting every fixture.
    #[test]
    fn raw_stream_golden_values() {
        let r = CounterRng::new(0);
        assert_eq!(r.value(0), mix64(GOLDEN_GAMMA));
        assert_eq!(r.value(0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(r.value(1), 0x6e78_9e6a_a1b9_65f4);
        assert_eq!(r.value(2), 0x06c4_5d18_8009_454f);
    }

    #[test]
    fn uniform_is_in_half_open_unit_interval() {
        let r = CounterRng::new(7);
        for i in 0..10_000 {
            let u = r.uniform(i);
            assert!(u > 0.0 && u <= 1.0, "u = {u}");
        }
    }

    #[test]
    fn substreams_differ_per_name() {
        let a = CounterRng::substream(1, "layer.0.weight");
        let b = CounterRng::substream(1, "layer.1.weight");
        let same = (0..32).filter(|&i| a.value(i) == b.value(i)).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn gaussian_moments_are_sane() {
        let r = CounterRng::new(123);
        let n = 200_000u64;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for i in 0..n {
            let z = r.gaussian(i);
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean = {mean}");
        assert!((var - 1.0).abs() < 0.02, "var = {var}");
    }
}
