//! Synthetic attention heads with a planted sparsity pattern.
//!
//! # Random numbers
//!
//! All randomness comes from SplitMix64 (Vigna's reference `splitmix64.c`,
//! state initialized to the seed, increment `0x9E3779B97F4A7C15`, mixing
//! constants `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`). A uniform
//! `u ∈ [0, 1)` is `(next_u64() >> 11) · 2⁻⁵³`. Standard normals use the
//! Box–Muller transform on `u1 = 1 − uniform()`, `u2 = uniform()`, yielding
//! `√(−2 ln u1)·cos(2πu2)` and then `√(−2 ln u1)·sin(2πu2)` on the next call.
//! Transcendentals come from `libm`, so heads are bitwise reproducible.
//!
//! # Construction
//!
//! Temporal and spatial heads embed a band coordinate `x` (in-frame offset,
//! or frame index) with Fourier features of period `P = 2·extent`:
//! `φ(x) = [√w_r cos(2πrx/P), √w_r sin(2πrx/P)]` for `r = 1..=R`, with
//! `w_r ∝ exp(−(2πrσ/P)²/2)` normalized to sum to one, `σ` the locality
//! width and `R = min(d/2, extent)`. Then `φ(x)·φ(y)` is a periodic Gaussian
//! kernel in `x − y` with value 1 at zero. Queries and keys are
//! `a·φ(x)` with `a² = SHARPNESS·√d`, so the scaled score peaks at
//! [`SHARPNESS`].
//!
//! Textural heads aim every query along a shared random direction `u`
//! (`q = a·u + 0.5·g`, `g` standard normal) and choose `max(1, round(0.02·n))`
//! hub keys `k = a·u`; the other keys are `0.5·g`.
//!
//! Values are standard normal. Finally `noise_scale·g` is added to every
//! query entry, then every key entry.
//!
//! Draw order: structure (textural only: `u`, hub positions by partial
//! Fisher–Yates, query offsets, non-hub keys, all row-major), then `V`
//! row-major, then query noise, then key noise.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::math::{AttentionHead, Matrix};
use crate::patterns::{LatentShape, PatternKind};
use crate::{Error, Result};

/// Peak scaled score of a planted head.
pub const SHARPNESS: f64 = 12.0;

/// Fraction of keys promoted to hubs in a textural head.
pub const HUB_FRACTION: f64 = 0.02;

/// Deterministic generator described in the module docs.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: SplitMix64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..bound` (bound > 0), by rejection.
    pub fn below(&mut self, bound: usize) -> usize {
        let bound = bound as u64;
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % bound) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }
}

/// Recipe for one planted head.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub kind: PatternKind,
    pub shape: LatentShape,
    pub d: usize,
    /// Kernel width σ: in-frame offsets (temporal) or frames (spatial).
    /// Unused by textural heads.
    pub locality_width: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl PlantedSpec {
    /// Spec with the default locality width and no noise.
    pub fn new(kind: PatternKind, shape: LatentShape, d: usize, seed: u64) -> Self {
        Self {
            kind,
            shape,
            d,
            locality_width: default_locality_width(kind, shape),
            noise_scale: 0.0,
            seed,
        }
    }

    pub fn with_noise(mut self, noise_scale: f64) -> Self {
        self.noise_scale = noise_scale;
        self
    }

    pub fn with_locality(mut self, width: usize) -> Self {
        self.locality_width = width;
        self
    }
}

/// `frame_len / 32` offsets for temporal heads, one frame for spatial heads.
pub fn default_locality_width(kind: PatternKind, shape: LatentShape) -> usize {
    match kind {
        PatternKind::Temporal => (shape.frame_len() / 32).max(1),
        PatternKind::Spatial | PatternKind::Textural => 1,
    }
}

/// Fourier codebook of a periodic Gaussian kernel over `0..extent`.
struct Codebook {
    period: f64,
    weights: Vec<f64>,
}

impl Codebook {
    fn new(extent: usize, sigma: f64, d: usize) -> Self {
        let period = 2.0 * extent as f64;
        let freqs = (d / 2).min(extent).max(1);
        let mut weights: Vec<f64> = (1..=freqs)
            .map(|r| {
                let z = 2.0 * PI * r as f64 * sigma / period;
                libm::exp(-0.5 * z * z)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self { period, weights }
    }

    /// Writes `scale · φ(x)` into the first `2R` entries of `out`.
    fn encode(&self, x: usize, scale: f64, out: &mut [f32]) {
        for (r, w) in self.weights.iter().enumerate() {
            let angle = 2.0 * PI * (r + 1) as f64 * x as f64 / self.period;
            let amp = scale * libm::sqrt(*w);
            if 2 * r < out.len() {
                out[2 * r] = (amp * libm::cos(angle)) as f32;
            }
            if 2 * r + 1 < out.len() {
                out[2 * r + 1] = (amp * libm::sin(angle)) as f32;
            }
        }
    }
}

fn check_spec(spec: &PlantedSpec) -> Result<()> {
    if spec.d == 0 {
        return Err(Error::invalid("d", "head dimension must be positive"));
    }
    if !(spec.noise_scale >= 0.0 && spec.noise_scale.is_finite()) {
        return Err(Error::invalid("noise_scale", "must be finite and >= 0"));
    }
    if spec.kind != PatternKind::Textural && spec.locality_width == 0 {
        return Err(Error::invalid("locality_width", "must be >= 1"));
    }
    Ok(())
}

/// Builds the head described by `spec`; see the module docs for the recipe.
pub fn generate_planted(spec: &PlantedSpec) -> Result<AttentionHead> {
    check_spec(spec)?;
    let shape = spec.shape;
    let (n, d) = (shape.n(), spec.d);
    let amp = libm::sqrt(SHARPNESS * libm::sqrt(d as f64));
    let mut rng = Rng::new(spec.seed);
    let mut q = Matrix::zeros(n, d);
    let mut k = Matrix::zeros(n, d);

    match spec.kind {
        PatternKind::Temporal | PatternKind::Spatial => {
            let (extent, coord): (usize, fn(&LatentShape, usize) -> usize) = match spec.kind {
                PatternKind::Temporal => (shape.frame_len(), |s, p| s.spatial(p)),
                _ => (shape.t(), |s, p| s.frame(p)),
            };
            let book = Codebook::new(extent, spec.locality_width as f64, d);
            for p in 0..n {
                let x = coord(&shape, p);
                book.encode(x, amp, q.row_mut(p));
                book.encode(x, amp, k.row_mut(p));
            }
        }
        PatternKind::Textural => {
            let mut u: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = libm::sqrt(u.iter().map(|x| x * x).sum::<f64>());
            u.iter_mut().for_each(|x| *x /= norm);

            let hubs = hub_positions(&mut rng, n);
            let mut is_hub = vec![false; n];
            hubs.iter().for_each(|&h| is_hub[h] = true);

            for p in 0..n {
                for (c, x) in q.row_mut(p).iter_mut().enumerate() {
                    *x = (amp * u[c] + 0.5 * rng.normal()) as f32;
                }
            }
            for p in 0..n {
                let row = k.row_mut(p);
                if is_hub[p] {
                    for (c, x) in row.iter_mut().enumerate() {
                        *x = (amp * u[c]) as f32;
                    }
                } else {
                    for x in row.iter_mut() {
                        *x = (0.5 * rng.normal()) as f32;
                    }
                }
            }
        }
    }

    let v = Matrix::from_fn(n, d, |_, _| rng.normal() as f32);
    if spec.noise_scale > 0.0 {
        for m in [&mut q, &mut k] {
            for x in m.as_mut_slice() {
                *x += (spec.noise_scale * rng.normal()) as f32;
            }
        }
    }
    AttentionHead::new(q, k, v)
}

/// Hub keys of a textural head, `max(1, round(0.02·n))` distinct positions.
pub fn hub_count(n: usize) -> usize {
    (libm::round(HUB_FRACTION * n as f64) as usize).clamp(1, n)
}

fn hub_positions(rng: &mut Rng, n: usize) -> Vec<usize> {
    let count = hub_count(n);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + rng.below(n - i);
        perm.swap(i, j);
    }
    perm.truncate(count);
    perm
}
