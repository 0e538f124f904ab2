/// Deterministic counter-based RNG (SplitMix64).
///
/// The same seed yields the same draw sequence on every platform; `stream`
/// derives independent generators for concurrent work (per-sequence dropout
/// masks, data synthesis) without advancing the parent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, state: seed }
    }

    /// Rebuild a generator saved as (seed, state), e.g. from a checkpoint.
    pub fn restore(seed: u64, state: u64) -> Self {
        Rng { seed, state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        // Desk-scale n; modulo bias is negligible against 2^64.
        self.next_u64() % n
    }

    /// Derive an independent generator for the given tag. Does not advance
    /// `self`, so the same (rng, tag) pair always yields the same stream.
    pub fn stream(&self, tag: u64) -> Rng {
        Rng::new(mix(self.seed ^ tag.wrapping_mul(GOLDEN)).wrapping_add(tag))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn known_fixpoints_stay_stable() {
        // Frozen draws; a change here means reproducibility breaks.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn streams_are_independent_and_stable() {
        let base = Rng::new(7);
        let mut s1 = base.stream(1);
        let mut s1b = base.stream(1);
        let mut s2 = base.stream(2);
        let a = s1.next_u64();
        assert_eq!(a, s1b.next_u64());
        assert_ne!(a, s2.next_u64());
        // Deriving a stream leaves the parent untouched.
        assert_eq!(base.state(), 7);
    }

    #[test]
    fn uniform_respects_bounds() {
        let mut r = Rng::new(9);
        for _ in 0..1000 {
            let x = r.uniform(-0.25, 0.25);
            assert!((-0.25..0.25).contains(&x));
        }
    }
}
