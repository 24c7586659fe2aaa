//! Counter-based deterministic random numbers.
//!
//! The generator is SplitMix64 written in counter form: the `i`-th output
//! (`i` starting at 1) is
//!
//! ```text
//! z = seed + i * 0x9E37_79B9_7F4A_7C15          (wrapping)
//! z = (z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9   (wrapping)
//! z = (z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB   (wrapping)
//! out = z ^ (z >> 31)
//! ```
//!
//! Uniform doubles take the top 53 bits: `(out >> 11) * 2^-53`, giving
//! `[0, 1)`. Normal deviates use the Box-Muller transform on two consecutive
//! uniforms `u1, u2`, `r = sqrt(-2 ln(1 - u1))`, returning `r cos(2 pi u2)`
//! first and caching `r sin(2 pi u2)` for the next call. Bounded integers use
//! rejection on the remainder so every residue is equally likely.
//!
//! Only integer arithmetic and IEEE-754 `ln`/`sqrt`/`sin`/`cos` are involved,
//! so streams reproduce across platforms.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded SplitMix64 stream. Single-owner; clone to fork an identical copy.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `(self.seed, stream)`; does not advance `self`.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA))))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, bound)`. `bound` must be positive.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "Rng::below requires a positive bound");
        loop {
            let x = self.next_u64();
            let r = x % bound;
            if x - r <= u64::MAX - (bound - 1) {
                return r;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * angle.sin());
        r * angle.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct values from `[0, n)` in sampling order (partial Fisher-Yates).
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
