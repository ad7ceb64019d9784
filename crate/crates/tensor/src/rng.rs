//! Seeded Gaussian source.
//!
//! Uniforms come from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with a
//! 64-bit seed and an optional 64-bit stream id. Normals use the Box–Muller
//! transform: two uniforms `u1 in (0,1]`, `u2 in [0,1)` give
//! `r = sqrt(-2 ln u1)`, and the pair `(r cos 2πu2, r sin 2πu2)` is emitted
//! cosine first. Output is bit-reproducible for a given `(seed, stream)`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GaussianRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent stream keyed by `(seed, stream)`, e.g. a training step index.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, spare: None }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 53-bit uniform in (0, 1]
        let u1 = ((self.inner.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64;
        let u2 = (self.inner.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }
}
