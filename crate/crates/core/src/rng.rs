//! Portable, seedable random streams.
//!
//! The generator is xoshiro256** seeded through SplitMix64 (the reference
//! seeding procedure of the xoshiro family), so a `u64` seed fixes the stream
//! on every platform. Normal variates use the polar-free Box–Muller transform
//! with a cached second variate.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Clone, Debug)]
pub struct PortableRng {
    inner: Xoshiro256StarStar,
    spare: Option<f64>,
}

impl PortableRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Derives an independent stream for a sub-task (grid node, seed index, ...).
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mixed = splitmix64(seed ^ splitmix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        Self::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (z0, z1) = box_muller(1.0 - self.uniform(), self.uniform());
        self.spare = Some(z1);
        z0
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n.max(1)
    }
}

/// Maps `u1 ∈ (0,1]`, `u2 ∈ [0,1)` to two independent standard normals.
pub fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = (-2.0 * u1.ln()).sqrt();
    let phi = 2.0 * std::f64::consts::PI * u2;
    (r * phi.cos(), r * phi.sin())
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic low-discrepancy unit directions in `dim` dimensions.
///
/// Points of the additive recurrence `frac(offset + i·alpha)` with the
/// generalized golden-ratio `alpha` are mapped pairwise through Box–Muller and
/// normalized. The offset comes from the seed (Cranley–Patterson rotation).
pub fn low_discrepancy_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let pairs = dim.div_ceil(2);
    let d = 2 * pairs;
    // root of x^(d+1) = x + 1
    let mut phi = 2.0f64;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (d as f64 + 1.0));
    }
    let alpha: Vec<f64> = (1..=d).map(|k| (1.0 / phi.powi(k as i32)).fract()).collect();
    let mut rng = PortableRng::new(seed);
    let offset: Vec<f64> = (0..d).map(|_| rng.uniform()).collect();

    let mut out = Vec::with_capacity(count);
    let mut i = 0u64;
    while out.len() < count {
        i += 1;
        let u: Vec<f64> = (0..d)
            .map(|k| (offset[k] + i as f64 * alpha[k]).fract())
            .collect();
        let mut v = Vec::with_capacity(d);
        for p in 0..pairs {
            let (a, b) = box_muller(1.0 - u[2 * p], u[2 * p + 1]);
            v.push(a);
            v.push(b);
        }
        v.truncate(dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 && norm.is_finite() {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}
