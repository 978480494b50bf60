//! Deterministic pseudo-random streams.
//!
//! Every stochastic routine in the crate draws from [`SplitMix64`], a 64-bit
//! counter generator defined here by its algorithm rather than by a library,
//! so that seeded runs reproduce bit-identically and the draw sequence can be
//! reimplemented in any language. Integer and uniform draws involve only
//! exact integer/float arithmetic; normal draws go through `ln`, `sqrt`,
//! `cos` and `sin`, so their low bits follow the platform libm.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output scrambler (Stafford mix 13).
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a master seed and a stream tag.
///
/// Defined as `mix64(seed ^ mix64(tag + GOLDEN_GAMMA))` with wrapping
/// arithmetic; distinct tags give decorrelated streams.
pub fn child_seed(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(GOLDEN_GAMMA)))
}

/// SplitMix64 stream: the state advances by the golden-ratio increment and
/// each output is `mix64` of the new state.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
    spare_normal: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index needs a nonempty range");
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw via Box-Muller.
    ///
    /// Draws are produced in pairs from two consecutive uniforms (the first
    /// shifted into `(0, 1]` so `ln` stays finite); the second of each pair
    /// is cached and returned by the following call.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * SCALE;
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * theta.sin());
        radius * theta.cos()
    }
}

/// Uniform sample of `k` distinct indices from `0..n`, in selection order.
///
/// Implemented as the first `k` steps of a Fisher-Yates pass: at step `i`
/// the index at position `i + next_index(n - i)` is swapped into position
/// `i`. Panics if `k > n`.
pub fn sample_without_replacement(n: usize, k: usize, rng: &mut SplitMix64) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} of {n} without replacement");
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.next_index(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}
