//! Online head classification from sampled attention recall.
//!
//! A head is probed twice: the first frame's tokens against the temporal
//! band (local sampling) and every `ω`-th token against the spatial band
//! (global sampling). Recall is the unmasked softmax mass that falls inside
//! the downsampled mask, averaged over sampled query rows. The temporal test
//! wins ties: a head whose local recall reaches `α` is temporal regardless
//! of its global recall.

use alloc::vec::Vec;

use crate::math::{score_matrix, softmax_in_place, AdditiveMask, AttentionHead, Matrix};
use crate::patterns::{LatentShape, PatternKind, PatternMask};
use crate::{Error, Result};

/// Head categories share the names of the patterns that serve them.
pub type HeadClass = PatternKind;

pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_BANDWIDTH: f64 = 0.25;
pub const DEFAULT_TAU: usize = 2;
/// Per-head bandwidth candidates of the adaptive mode.
pub const ADAPTIVE_CANDIDATES: [f64; 3] = [0.5, 0.25, 0.125];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// First frame.
    Local,
    /// Positions `0, ω, 2ω, …`.
    Global { interval: usize },
}

impl SamplingMode {
    fn name(self) -> &'static str {
        match self {
            SamplingMode::Local => "local",
            SamplingMode::Global { .. } => "global",
        }
    }
}

/// Subsampled queries and keys, with the positions they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPair {
    q_sub: Matrix,
    k_sub: Matrix,
    mode: SamplingMode,
    positions: Vec<usize>,
}

impl SampledPair {
    pub fn q_sub(&self) -> &Matrix {
        &self.q_sub
    }

    pub fn k_sub(&self) -> &Matrix {
        &self.k_sub
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    /// Sample count `m`.
    pub fn m(&self) -> usize {
        self.positions.len()
    }

    /// Original sequence position of each sampled row.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// `2·m²·d`, the cost of the sampled score matrix.
    pub fn score_flops(&self) -> u64 {
        let m = self.m() as u64;
        2 * m * m * self.q_sub.cols() as u64
    }
}

fn check_head_shape(head: &AttentionHead, shape: LatentShape) -> Result<()> {
    if head.n() != shape.n() {
        return Err(Error::ShapeMismatch("head length != t*h*w"));
    }
    Ok(())
}

fn sample(head: &AttentionHead, positions: Vec<usize>, mode: SamplingMode) -> SampledPair {
    SampledPair {
        q_sub: head.q().gather_rows(&positions),
        k_sub: head.k().gather_rows(&positions),
        mode,
        positions,
    }
}

/// Tokens of the first frame.
pub fn local_sample(head: &AttentionHead, shape: LatentShape) -> Result<SampledPair> {
    check_head_shape(head, shape)?;
    Ok(sample(head, (0..shape.frame_len()).collect(), SamplingMode::Local))
}

/// Tokens at positions `0, ω, 2ω, …` (`⌈n/ω⌉` of them).
pub fn global_sample(head: &AttentionHead, shape: LatentShape, interval: usize) -> Result<SampledPair> {
    check_head_shape(head, shape)?;
    if interval == 0 || interval > shape.n() {
        return Err(Error::invalid("interval", "must lie in 1..=n"));
    }
    let positions = (0..shape.n()).step_by(interval).collect();
    Ok(sample(head, positions, SamplingMode::Global { interval }))
}

/// The pattern restricted to the sampled positions (`m × m`).
pub fn downsample_mask(pattern: &PatternMask, sampled: &SampledPair) -> Result<AdditiveMask> {
    let compatible = matches!(
        (pattern.kind(), sampled.mode),
        (PatternKind::Temporal, SamplingMode::Local) | (PatternKind::Spatial, SamplingMode::Global { .. })
    );
    if !compatible {
        return Err(Error::SamplingPatternMismatch {
            pattern: pattern.kind().name(),
            sampling: sampled.mode.name(),
        });
    }
    let pos = &sampled.positions;
    let m = pos.len();
    Ok(AdditiveMask::from_fn(m, m, |a, b| pattern.contains(pos[a], pos[b])))
}

/// Row-softmax of the unmasked sampled scores; reused across masks.
#[derive(Debug, Clone)]
pub struct SampledProbabilities {
    m: usize,
    probs: Vec<f64>,
}

impl SampledProbabilities {
    pub fn new(sampled: &SampledPair) -> Self {
        let m = sampled.m();
        let mut probs = score_matrix(&sampled.q_sub, &sampled.k_sub);
        for (i, row) in probs.chunks_exact_mut(m).enumerate() {
            // Unmasked rows always hold finite scores.
            softmax_in_place(row, i).expect("unmasked softmax row");
        }
        Self { m, probs }
    }

    /// Mean retained mass under `mask`; an all-dropped row contributes zero.
    pub fn recall(&self, mask: &AdditiveMask) -> Result<f64> {
        let m = self.m;
        if mask.rows() != m || mask.cols() != m {
            return Err(Error::ShapeMismatch("recall mask must be m x m"));
        }
        if let AdditiveMask::Init { .. } = mask {
            return Ok(1.0);
        }
        let mut total = 0.0;
        for (a, row) in self.probs.chunks_exact(m).enumerate() {
            total += row
                .iter()
                .enumerate()
                .filter(|&(b, _)| mask.keeps(a, b))
                .map(|(_, p)| p)
                .sum::<f64>();
        }
        Ok((total / m as f64).clamp(0.0, 1.0))
    }
}

/// Retained softmax mass of the sampled scores under `mask`.
pub fn recall(sampled: &SampledPair, mask: &AdditiveMask) -> Result<f64> {
    SampledProbabilities::new(sampled).recall(mask)
}

/// The branch order of the recognition procedure, verbatim.
pub fn classify_recalls(r_temporal: f64, r_spatial: f64, alpha: f64) -> HeadClass {
    if r_temporal >= alpha {
        HeadClass::Temporal
    } else if r_spatial >= alpha {
        HeadClass::Spatial
    } else {
        HeadClass::Textural
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallReport {
    /// Local-sample recall under the temporal band.
    pub r_temporal: f64,
    /// Global-sample recall under the spatial band.
    pub r_spatial: f64,
    pub alpha: f64,
    pub head_class: HeadClass,
    /// Score FLOPs spent on both probes.
    pub overhead_flops: u64,
    /// `overhead_flops / (2·n²·d)`.
    pub overhead_ratio: f64,
}

/// Classifies one head. `interval` is the global sampling step `ω`.
pub fn classify_head(
    head: &AttentionHead,
    shape: LatentShape,
    alpha: f64,
    bandwidth: f64,
    interval: usize,
) -> Result<RecallReport> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", "must lie in [0, 1]"));
    }
    let local = local_sample(head, shape)?;
    let global = global_sample(head, shape, interval)?;
    let temporal = PatternMask::temporal(shape, bandwidth)?;
    let spatial = PatternMask::spatial(shape, bandwidth)?;

    let r_temporal = recall(&local, &downsample_mask(&temporal, &local)?)?;
    let r_spatial = recall(&global, &downsample_mask(&spatial, &global)?)?;

    let n = shape.n() as u64;
    let overhead_flops = local.score_flops() + global.score_flops();
    let full = 2 * n * n * head.d() as u64;
    Ok(RecallReport {
        r_temporal,
        r_spatial,
        alpha,
        head_class: classify_recalls(r_temporal, r_spatial, alpha),
        overhead_flops,
        overhead_ratio: overhead_flops as f64 / full as f64,
    })
}

/// Recall of each candidate bandwidth, probing `kind` the way the classifier
/// does (local for temporal, global with `ω = t` for spatial).
pub fn bandwidth_recalls(
    head: &AttentionHead,
    shape: LatentShape,
    kind: PatternKind,
    candidates: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let sampled = match kind {
        PatternKind::Temporal => local_sample(head, shape)?,
        PatternKind::Spatial => global_sample(head, shape, shape.t())?,
        PatternKind::Textural => {
            return Err(Error::invalid("kind", "bandwidth selection needs a band kind"))
        }
    };
    let probs = SampledProbabilities::new(&sampled);
    candidates
        .iter()
        .map(|&b| {
            let pattern = PatternMask::band(kind, shape, b)?;
            Ok((b, probs.recall(&downsample_mask(&pattern, &sampled)?)?))
        })
        .collect()
}

/// Smallest candidate whose recall reaches `target`, else the largest one.
pub fn select_bandwidth(
    head: &AttentionHead,
    shape: LatentShape,
    kind: PatternKind,
    candidates: &[f64],
    target: f64,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidates", "must not be empty"));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::invalid("target", "must lie in (0, 1]"));
    }
    let recalls = bandwidth_recalls(head, shape, kind, candidates)?;
    let qualifying = recalls
        .iter()
        .filter(|(_, r)| *r >= target)
        .map(|(b, _)| *b)
        .fold(f64::INFINITY, f64::min);
    if qualifying.is_finite() {
        Ok(qualifying)
    } else {
        Ok(candidates.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Knobs of the recognition step.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmConfig {
    pub alpha: f64,
    pub bandwidth: f64,
    /// Global sampling step; `None` means `t`.
    pub interval: Option<usize>,
    pub tau: usize,
    /// Per-head bandwidth candidates; `None` keeps `bandwidth` for every head.
    pub candidates: Option<Vec<f64>>,
    pub recall_target: f64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            bandwidth: DEFAULT_BANDWIDTH,
            interval: None,
            tau: DEFAULT_TAU,
            candidates: None,
            recall_target: DEFAULT_ALPHA,
        }
    }
}

/// Classification plus the sparse parameters chosen for execution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadDecision {
    pub report: RecallReport,
    /// Band width used for execution (band classes only).
    pub bandwidth: Option<f64>,
    /// Checkerboard stride (textural class only).
    pub tau: Option<usize>,
}

pub fn decide_head(head: &AttentionHead, shape: LatentShape, cfg: &ArmConfig) -> Result<HeadDecision> {
    let interval = cfg.interval.unwrap_or(shape.t());
    let report = classify_head(head, shape, cfg.alpha, cfg.bandwidth, interval)?;
    let (bandwidth, tau) = match report.head_class {
        PatternKind::Textural => (None, Some(cfg.tau)),
        kind => {
            let b = match &cfg.candidates {
                Some(c) => select_bandwidth(head, shape, kind, c, cfg.recall_target)?,
                None => cfg.bandwidth,
            };
            (Some(b), None)
        }
    };
    Ok(HeadDecision {
        report,
        bandwidth,
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate_planted, PlantedSpec, Rng};
    use alloc::vec;
    use proptest::prelude::*;

    fn shape(t: usize, h: usize, w: usize) -> LatentShape {
        LatentShape::new(t, h, w).unwrap()
    }

    fn random_head(s: LatentShape, d: usize, seed: u64, scale: f64) -> AttentionHead {
        let mut rng = Rng::new(seed);
        let mut m = || Matrix::from_fn(s.n(), d, |_, _| (scale * rng.normal()) as f32);
        let (q, k, v) = (m(), m(), m());
        AttentionHead::new(q, k, v).unwrap()
    }

    #[test]
    fn local_sample_is_first_frame() {
        let s = shape(3, 2, 3);
        let head = random_head(s, 4, 1, 1.0);
        let sp = local_sample(&head, s).unwrap();
        assert_eq!(sp.m(), 6);
        for i in 0..6 {
            assert_eq!(sp.q_sub().row(i), head.q().row(i));
            assert_eq!(sp.k_sub().row(i), head.k().row(i));
        }
        let s1 = shape(1, 2, 3);
        let h1 = random_head(s1, 4, 2, 1.0);
        assert_eq!(local_sample(&h1, s1).unwrap().q_sub(), h1.q());
    }

    #[test]
    fn local_sample_cost_on_cogvideo_grid() {
        let s = shape(12, 30, 45);
        let m = s.frame_len() as f64;
        let n = s.n() as f64;
        assert_eq!(s.frame_len(), 1350);
        assert!((m * m / (n * n) - 1.0 / 144.0).abs() < 1e-15);
    }

    #[test]
    fn global_sample_positions() {
        let s = shape(4, 2, 3);
        let head = random_head(s, 2, 3, 1.0);
        assert_eq!(global_sample(&head, s, 1).unwrap().m(), s.n());
        let one = global_sample(&head, s, s.n()).unwrap();
        assert_eq!(one.positions(), &[0]);
        let g = global_sample(&head, s, s.t()).unwrap();
        assert_eq!(g.m(), s.frame_len());
        // frame_len = 6, t = 4: frames of 0,4,8,...,20 are 0,0,1,2,2,3.
        let frames: Vec<usize> = g.positions().iter().map(|&p| s.frame(p)).collect();
        assert_eq!(frames, vec![0, 0, 1, 2, 2, 3]);
        assert!(global_sample(&head, s, 0).is_err());
    }

    #[test]
    fn global_sample_cycles_frames_when_coprime() {
        // frame_len = 5 and t = 3 are coprime, so sample j lands in frame ⌊3j/5⌋.
        let s = shape(3, 1, 5);
        let head = random_head(s, 2, 4, 1.0);
        let g = global_sample(&head, s, 3).unwrap();
        let frames: Vec<usize> = g.positions().iter().map(|&p| s.frame(p)).collect();
        assert_eq!(frames, vec![0, 0, 1, 1, 2]);
    }

    #[test]
    fn downsampled_masks() {
        let s = shape(3, 4, 4);
        let head = random_head(s, 4, 5, 1.0);
        let temporal = PatternMask::temporal(s, 0.25).unwrap();
        let local = local_sample(&head, s).unwrap();
        let m = downsample_mask(&temporal, &local).unwrap();
        for a in 0..16 {
            for b in 0..16 {
                assert_eq!(m.keeps(a, b), temporal.contains(a, b));
            }
        }

        let spatial = PatternMask::spatial(s, 0.25).unwrap();
        let all = global_sample(&head, s, 1).unwrap();
        let full = downsample_mask(&spatial, &all).unwrap();
        assert_eq!(full.to_keep_map(), spatial.element_mask().to_keep_map());

        let wide = PatternMask::spatial(s, 1.0).unwrap();
        let g = global_sample(&head, s, 3).unwrap();
        assert!(downsample_mask(&wide, &g).unwrap().to_keep_map().iter().all(|&k| k));

        let err = downsample_mask(&spatial, &local).unwrap_err();
        assert!(alloc::format!("{err}").contains("sampling/pattern mismatch"));
        assert!(downsample_mask(&PatternMask::textural(s, 2).unwrap(), &g).is_err());
    }

    #[test]
    fn recall_of_init_mask_is_one() {
        let s = shape(2, 3, 3);
        let head = random_head(s, 4, 6, 3.0);
        let sp = local_sample(&head, s).unwrap();
        assert_eq!(recall(&sp, &AdditiveMask::init(9)).unwrap(), 1.0);
    }

    #[test]
    fn uniform_recall_is_kept_fraction() {
        let s = shape(2, 2, 4);
        let q = Matrix::zeros(s.n(), 3);
        let head = AttentionHead::new(q.clone(), q.clone(), q).unwrap();
        let sp = local_sample(&head, s).unwrap();
        let c = 3;
        let mask = AdditiveMask::from_fn(8, 8, |a, b| (b + 8 - a) % 8 < c);
        assert!((recall(&sp, &mask).unwrap() - c as f64 / 8.0).abs() < 1e-12);
        let none = AdditiveMask::from_fn(8, 8, |a, _| a != 0);
        assert!((recall(&sp, &none).unwrap() - 7.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn algorithm_branch_order() {
        assert_eq!(classify_recalls(0.95, 0.97, 0.9), HeadClass::Temporal);
        assert_eq!(classify_recalls(0.2, 0.2, 0.9), HeadClass::Textural);
        assert_eq!(classify_recalls(0.5, 0.9, 0.9), HeadClass::Spatial);
        assert_eq!(classify_recalls(0.0, 0.0, 0.0), HeadClass::Temporal);
    }

    #[test]
    fn planted_heads_are_recognized() {
        let s = shape(12, 8, 8);
        for (kind, seed) in [
            (PatternKind::Temporal, 1),
            (PatternKind::Spatial, 2),
            (PatternKind::Textural, 3),
        ] {
            let head = generate_planted(&PlantedSpec::new(kind, s, 32, seed).with_noise(0.1)).unwrap();
            let report = classify_head(&head, s, 0.9, 0.25, s.t()).unwrap();
            assert_eq!(report.head_class, kind, "{report:?}");
            if kind == PatternKind::Spatial {
                assert!(report.r_temporal < 0.9 && report.r_spatial >= 0.9);
            }
        }
    }

    #[test]
    fn overhead_ratio_is_two_over_t_squared() {
        let s = shape(8, 2, 4);
        let head = random_head(s, 4, 7, 1.0);
        let r = classify_head(&head, s, 0.9, 0.25, s.t()).unwrap();
        assert_eq!(r.overhead_ratio, 2.0 / 64.0);
    }

    #[test]
    fn full_band_candidate_always_wins() {
        let s = shape(4, 3, 3);
        let head = random_head(s, 4, 8, 2.0);
        for kind in [PatternKind::Temporal, PatternKind::Spatial] {
            assert_eq!(select_bandwidth(&head, s, kind, &[1.0], 0.99).unwrap(), 1.0);
        }
    }

    #[test]
    fn sharp_head_takes_smallest_candidate() {
        let s = shape(4, 16, 16);
        let head = generate_planted(&PlantedSpec::new(PatternKind::Temporal, s, 32, 4).with_locality(1)).unwrap();
        let b = select_bandwidth(&head, s, PatternKind::Temporal, &ADAPTIVE_CANDIDATES, 0.9).unwrap();
        assert_eq!(b, 0.125);
    }

    #[test]
    fn unreachable_target_falls_back_to_largest() {
        let s = shape(4, 4, 4);
        let q = Matrix::zeros(s.n(), 2);
        let head = AttentionHead::new(q.clone(), q.clone(), q).unwrap();
        // Uniform attention: recall equals the kept fraction, well below 0.99.
        let b = select_bandwidth(&head, s, PatternKind::Temporal, &[0.25, 0.125], 0.99).unwrap();
        assert_eq!(b, 0.25);
    }

    #[test]
    fn decide_head_uses_candidates_when_given() {
        let s = shape(4, 16, 16);
        let head = generate_planted(&PlantedSpec::new(PatternKind::Temporal, s, 32, 4).with_locality(1)).unwrap();
        let mut cfg = ArmConfig::default();
        assert_eq!(decide_head(&head, s, &cfg).unwrap().bandwidth, Some(0.25));
        cfg.candidates = Some(ADAPTIVE_CANDIDATES.to_vec());
        let dec = decide_head(&head, s, &cfg).unwrap();
        assert_eq!(dec.bandwidth, Some(0.125));
        assert_eq!(dec.tau, None);
    }

    proptest! {
        #[test]
        fn recall_is_bounded_and_monotone(seed in 0u64..1000, scale in 0.1f64..4.0) {
            let s = shape(4, 3, 4);
            let head = random_head(s, 4, seed, scale);
            let mut last = -1.0;
            for b in [0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0] {
                let r = bandwidth_recalls(&head, s, PatternKind::Temporal, &[b]).unwrap()[0].1;
                prop_assert!((0.0..=1.0).contains(&r));
                prop_assert!(r >= last);
                last = r;
            }
        }

        #[test]
        fn classification_is_deterministic(seed in 0u64..1000) {
            let s = shape(3, 2, 2);
            let head = random_head(s, 3, seed, 2.0);
            let a = classify_head(&head, s, 0.9, 0.25, 3).unwrap();
            let b = classify_head(&head, s, 0.9, 0.25, 3).unwrap();
            prop_assert_eq!(a.r_temporal.to_bits(), b.r_temporal.to_bits());
            prop_assert_eq!(a.r_spatial.to_bits(), b.r_spatial.to_bits());
            prop_assert_eq!(a.head_class, b.head_class);
        }
    }
}
