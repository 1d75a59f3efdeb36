//! The three sparse pattern families over a latent grid, and their tiled
//! (block-sparse) realization.
//!
//! * Spatial: a query keeps every token of the frames within `half_width`
//!   frames of its own frame.
//! * Temporal: a query keeps, in every frame, the tokens whose in-frame
//!   offset is within `half_width` of its own offset.
//! * Textural: every query keeps the same key subset, the cells `(i, j)` of
//!   each frame with `i mod τ == j mod τ`.
//!
//! Band half-widths are `max(1, round(b · extent))` where the extent is the
//! frame count (spatial) or the frame length (temporal), so a band always
//! covers its own frame / own offset.

use alloc::vec::Vec;
use core::fmt;

use crate::math::AdditiveMask;
use crate::{Error, Result};

/// `(t, h, w)` grid of a video latent; tokens are flattened frame-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatentShape {
    t: usize,
    h: usize,
    w: usize,
}

impl LatentShape {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("shape", "t, h and w must all be >= 1"));
        }
        Ok(Self { t, h, w })
    }

    #[inline]
    pub fn t(&self) -> usize {
        self.t
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn frame_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.t * self.h * self.w
    }

    #[inline]
    pub fn frame(&self, p: usize) -> usize {
        p / self.frame_len()
    }

    /// In-frame offset of position `p`.
    #[inline]
    pub fn spatial(&self, p: usize) -> usize {
        p % self.frame_len()
    }

    #[inline]
    pub fn position(&self, frame: usize, spatial: usize) -> usize {
        frame * self.frame_len() + spatial
    }
}

impl fmt::Display for LatentShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternKind {
    Spatial,
    Temporal,
    Textural,
}

impl PatternKind {
    pub fn name(self) -> &'static str {
        match self {
            PatternKind::Spatial => "spatial",
            PatternKind::Temporal => "temporal",
            PatternKind::Textural => "textural",
        }
    }
}

/// `max(1, round(bandwidth · extent))`.
pub fn band_half_width(bandwidth: f64, extent: usize) -> usize {
    let hw = libm::round(bandwidth * extent as f64);
    if hw < 1.0 {
        1
    } else {
        hw as usize
    }
}

/// Number of ordered pairs `(x, y)` in `0..extent` with `|x − y| ≤ half_width`.
pub fn band_pair_count(extent: usize, half_width: usize) -> u64 {
    (0..extent)
        .map(|x| {
            let lo = x.saturating_sub(half_width);
            let hi = (x + half_width).min(extent - 1);
            (hi - lo + 1) as u64
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Params {
    Band { bandwidth: f64, half_width: usize },
    Stride(usize),
}

/// A sparse pattern of one kind over a fixed latent shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternMask {
    kind: PatternKind,
    params: Params,
    shape: LatentShape,
}

fn check_bandwidth(bandwidth: f64) -> Result<()> {
    if !(bandwidth > 0.0 && bandwidth <= 1.0) {
        return Err(Error::invalid("bandwidth", "must lie in (0, 1]"));
    }
    Ok(())
}

fn check_stride(shape: LatentShape, tau: usize) -> Result<()> {
    if tau == 0 {
        return Err(Error::invalid("tau", "must be >= 1"));
    }
    if tau > shape.h.min(shape.w) {
        return Err(Error::DegenerateStride {
            tau,
            h: shape.h,
            w: shape.w,
        });
    }
    Ok(())
}

impl PatternMask {
    pub fn spatial(shape: LatentShape, bandwidth: f64) -> Result<Self> {
        check_bandwidth(bandwidth)?;
        Ok(Self {
            kind: PatternKind::Spatial,
            params: Params::Band {
                bandwidth,
                half_width: band_half_width(bandwidth, shape.t),
            },
            shape,
        })
    }

    pub fn temporal(shape: LatentShape, bandwidth: f64) -> Result<Self> {
        check_bandwidth(bandwidth)?;
        Ok(Self {
            kind: PatternKind::Temporal,
            params: Params::Band {
                bandwidth,
                half_width: band_half_width(bandwidth, shape.frame_len()),
            },
            shape,
        })
    }

    pub fn textural(shape: LatentShape, tau: usize) -> Result<Self> {
        check_stride(shape, tau)?;
        Ok(Self {
            kind: PatternKind::Textural,
            params: Params::Stride(tau),
            shape,
        })
    }

    /// Band pattern of the given kind; `Textural` is rejected.
    pub fn band(kind: PatternKind, shape: LatentShape, bandwidth: f64) -> Result<Self> {
        match kind {
            PatternKind::Spatial => Self::spatial(shape, bandwidth),
            PatternKind::Temporal => Self::temporal(shape, bandwidth),
            PatternKind::Textural => Err(Error::invalid("kind", "textural is not a band pattern")),
        }
    }

    #[inline]
    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    #[inline]
    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn bandwidth(&self) -> Option<f64> {
        match self.params {
            Params::Band { bandwidth, .. } => Some(bandwidth),
            Params::Stride(_) => None,
        }
    }

    pub fn half_width(&self) -> Option<usize> {
        match self.params {
            Params::Band { half_width, .. } => Some(half_width),
            Params::Stride(_) => None,
        }
    }

    pub fn stride(&self) -> Option<usize> {
        match self.params {
            Params::Stride(tau) => Some(tau),
            Params::Band { .. } => None,
        }
    }

    /// Coordinate a band is measured in: frame index (spatial) or in-frame
    /// offset (temporal). Undefined for textural patterns.
    #[inline]
    pub(crate) fn band_coord(&self, p: usize) -> usize {
        match self.kind {
            PatternKind::Spatial => self.shape.frame(p),
            _ => self.shape.spatial(p),
        }
    }

    #[inline]
    fn checker_keeps(&self, tau: usize, spatial: usize) -> bool {
        let (i, j) = (spatial / self.shape.w, spatial % self.shape.w);
        i % tau == j % tau
    }

    /// Whether query `q` attends to key `k`.
    #[inline]
    pub fn contains(&self, q: usize, k: usize) -> bool {
        match self.params {
            Params::Band { half_width, .. } => {
                self.band_coord(q).abs_diff(self.band_coord(k)) <= half_width
            }
            Params::Stride(tau) => self.checker_keeps(tau, self.shape.spatial(k)),
        }
    }

    /// Exact number of kept `(q, k)` pairs.
    pub fn kept_pairs(&self) -> u64 {
        let s = self.shape;
        let (fl, t) = (s.frame_len() as u64, s.t as u64);
        match (self.kind, self.params) {
            (PatternKind::Spatial, Params::Band { half_width, .. }) => {
                band_pair_count(s.t, half_width) * fl * fl
            }
            (PatternKind::Temporal, Params::Band { half_width, .. }) => {
                band_pair_count(s.frame_len(), half_width) * t * t
            }
            (_, Params::Stride(tau)) => {
                let kept = checkerboard_count(s.h, s.w, tau) as u64;
                s.n() as u64 * kept * t
            }
            _ => unreachable!("band kind always carries band parameters"),
        }
    }

    /// Kept `(q, k)` pairs over `n²`; for textural patterns this equals the
    /// retained key fraction `|C|·t / n`.
    pub fn kept_fraction(&self) -> f64 {
        let n = self.shape.n() as f64;
        self.kept_pairs() as f64 / (n * n)
    }

    pub fn element_mask(&self) -> AdditiveMask {
        AdditiveMask::Pattern(self.clone())
    }
}

/// Free-function form of [`PatternMask::kept_fraction`].
pub fn kept_fraction(pattern: &PatternMask) -> f64 {
    pattern.kept_fraction()
}

/// Free-function form of [`PatternMask::spatial`] membership.
pub fn spatial_mask_contains(shape: LatentShape, bandwidth: f64, qpos: usize, kpos: usize) -> bool {
    shape.frame(qpos).abs_diff(shape.frame(kpos)) <= band_half_width(bandwidth, shape.t)
}

/// Free-function form of [`PatternMask::temporal`] membership.
pub fn temporal_mask_contains(
    shape: LatentShape,
    bandwidth: f64,
    qpos: usize,
    kpos: usize,
) -> bool {
    shape.spatial(qpos).abs_diff(shape.spatial(kpos))
        <= band_half_width(bandwidth, shape.frame_len())
}

fn residue_count(len: usize, tau: usize, k: usize) -> usize {
    if k >= len {
        0
    } else {
        (len - k).div_ceil(tau)
    }
}

/// Closed-form size of the per-frame checkerboard set.
pub fn checkerboard_count(h: usize, w: usize, tau: usize) -> usize {
    (0..tau)
        .map(|k| residue_count(h, tau, k) * residue_count(w, tau, k))
        .sum()
}

/// Kept in-frame offsets of the checkerboard key subset, shared by all frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckerboardSet {
    shape: LatentShape,
    tau: usize,
    indices: Vec<usize>,
}

impl CheckerboardSet {
    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    /// Sorted in-frame offsets.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Kept sequence positions over all frames, ascending.
    pub fn key_positions(&self) -> Vec<usize> {
        let fl = self.shape.frame_len();
        (0..self.shape.t)
            .flat_map(|f| self.indices.iter().map(move |&s| f * fl + s))
            .collect()
    }

    /// `|C| / frame_len`, the fraction of keys kept.
    pub fn key_fraction(&self) -> f64 {
        self.indices.len() as f64 / self.shape.frame_len() as f64
    }
}

pub fn checkerboard_indices(shape: LatentShape, tau: usize) -> Result<CheckerboardSet> {
    check_stride(shape, tau)?;
    let indices = (0..shape.frame_len())
        .filter(|&s| (s / shape.w) % tau == (s % shape.w) % tau)
        .collect();
    Ok(CheckerboardSet {
        shape,
        tau,
        indices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockState {
    Empty,
    /// Every pair in the tile is kept.
    Full,
    /// Some pairs are kept; the element mask applies inside the tile.
    Partial,
}

/// Tiled realization of a pattern on a `⌈n/bs⌉ × ⌈n/bs⌉` block grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    pattern: PatternMask,
    block_size: usize,
    blocks: usize,
    states: Vec<BlockState>,
}

/// Coordinate runs of a position range: contiguous pieces inside one frame,
/// each mapped to the inclusive interval of band coordinates it covers.
fn coord_runs(pattern: &PatternMask, start: usize, end: usize, out: &mut Vec<(usize, usize)>) {
    out.clear();
    let fl = pattern.shape.frame_len();
    let mut p = start;
    while p < end {
        let stop = ((p / fl + 1) * fl).min(end);
        out.push((pattern.band_coord(p), pattern.band_coord(stop - 1)));
        p = stop;
    }
}

fn band_block_state(rows: &[(usize, usize)], cols: &[(usize, usize)], hw: usize) -> BlockState {
    let mut any = false;
    let mut all = true;
    for &(a0, a1) in rows {
        for &(b0, b1) in cols {
            let min_dist = b0.saturating_sub(a1).max(a0.saturating_sub(b1));
            let max_dist = (a1.abs_diff(b0)).max(b1.abs_diff(a0));
            any |= min_dist <= hw;
            all &= max_dist <= hw;
        }
    }
    match (any, all) {
        (_, true) => BlockState::Full,
        (false, _) => BlockState::Empty,
        _ => BlockState::Partial,
    }
}

impl BlockMask {
    #[inline]
    pub fn pattern(&self) -> &PatternMask {
        &self.pattern
    }

    #[inline]
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Blocks per side.
    #[inline]
    pub fn blocks(&self) -> usize {
        self.blocks
    }

    #[inline]
    pub fn state(&self, qb: usize, kb: usize) -> BlockState {
        self.states[qb * self.blocks + kb]
    }

    /// Positions covered by block index `b` (the last block may be short).
    #[inline]
    pub fn block_range(&self, b: usize) -> (usize, usize) {
        let n = self.pattern.shape.n();
        (b * self.block_size, ((b + 1) * self.block_size).min(n))
    }

    /// Non-empty tiles of one block row.
    pub fn active_in_row(&self, qb: usize) -> impl Iterator<Item = (usize, BlockState)> + '_ {
        self.states[qb * self.blocks..(qb + 1) * self.blocks]
            .iter()
            .enumerate()
            .filter(|(_, s)| **s != BlockState::Empty)
            .map(|(kb, s)| (kb, *s))
    }

    pub fn count(&self, state: BlockState) -> usize {
        self.states.iter().filter(|s| **s == state).count()
    }

    /// Element count of all non-empty tiles (short edge tiles counted exactly).
    pub fn active_area(&self) -> u64 {
        let mut area = 0u64;
        for qb in 0..self.blocks {
            let (q0, q1) = self.block_range(qb);
            for (kb, _) in self.active_in_row(qb) {
                let (k0, k1) = self.block_range(kb);
                area += ((q1 - q0) * (k1 - k0)) as u64;
            }
        }
        area
    }

    /// Element membership reconstructed from the tiles.
    #[inline]
    pub fn keeps(&self, q: usize, k: usize) -> bool {
        match self.state(q / self.block_size, k / self.block_size) {
            BlockState::Empty => false,
            BlockState::Full => true,
            BlockState::Partial => self.pattern.contains(q, k),
        }
    }
}

/// Every block state of one block row; rows are independent of each other.
pub fn build_block_row(pattern: &PatternMask, block_size: usize, qb: usize) -> Vec<BlockState> {
    let n = pattern.shape.n();
    let blocks = n.div_ceil(block_size);
    let range = |b: usize| (b * block_size, ((b + 1) * block_size).min(n));
    let (q0, q1) = range(qb);
    let mut row = Vec::with_capacity(blocks);
    match pattern.params {
        Params::Band { half_width, .. } => {
            let mut rows = Vec::new();
            let mut cols = Vec::new();
            coord_runs(pattern, q0, q1, &mut rows);
            for kb in 0..blocks {
                let (k0, k1) = range(kb);
                coord_runs(pattern, k0, k1, &mut cols);
                row.push(band_block_state(&rows, &cols, half_width));
            }
        }
        Params::Stride(_) => {
            // Key-only membership: the state depends on the key block alone.
            for kb in 0..blocks {
                let (k0, k1) = range(kb);
                let kept = (k0..k1).filter(|&k| pattern.contains(q0, k)).count();
                row.push(if kept == 0 {
                    BlockState::Empty
                } else if kept == k1 - k0 {
                    BlockState::Full
                } else {
                    BlockState::Partial
                });
            }
        }
    }
    row
}

/// Tiles `pattern` with square blocks of `block_size` (a power of two).
pub fn build_block_mask(pattern: &PatternMask, block_size: usize) -> Result<BlockMask> {
    if !block_size.is_power_of_two() {
        return Err(Error::invalid("block_size", "must be a power of two"));
    }
    let blocks = pattern.shape.n().div_ceil(block_size);
    let mut states = Vec::with_capacity(blocks * blocks);
    for qb in 0..blocks {
        states.extend(build_block_row(pattern, block_size, qb));
    }
    Ok(BlockMask {
        pattern: pattern.clone(),
        block_size,
        blocks,
        states,
    })
}

/// Assembles a mask from rows built elsewhere (e.g. in parallel).
pub fn block_mask_from_rows(
    pattern: &PatternMask,
    block_size: usize,
    rows: Vec<Vec<BlockState>>,
) -> Result<BlockMask> {
    if !block_size.is_power_of_two() {
        return Err(Error::invalid("block_size", "must be a power of two"));
    }
    let blocks = pattern.shape.n().div_ceil(block_size);
    if rows.len() != blocks || rows.iter().any(|r| r.len() != blocks) {
        return Err(Error::ShapeMismatch("block rows do not match the block grid"));
    }
    Ok(BlockMask {
        pattern: pattern.clone(),
        block_size,
        blocks,
        states: rows.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn shape(t: usize, h: usize, w: usize) -> LatentShape {
        LatentShape::new(t, h, w).unwrap()
    }

    /// Brute-force count of frame pairs with |fq − fk| ≤ hw.
    fn frame_pairs(t: usize, hw: usize) -> usize {
        let mut c = 0;
        for a in 0..t {
            for b in 0..t {
                if a.abs_diff(b) <= hw {
                    c += 1;
                }
            }
        }
        c
    }

    #[test]
    fn position_decomposition() {
        let s = shape(3, 2, 5);
        assert_eq!(s.n(), 30);
        for p in 0..s.n() {
            assert_eq!(s.position(s.frame(p), s.spatial(p)), p);
        }
        assert!(LatentShape::new(0, 1, 1).is_err());
    }

    #[test]
    fn full_bandwidth_keeps_everything() {
        let s = shape(4, 3, 3);
        for p in [
            PatternMask::spatial(s, 1.0).unwrap(),
            PatternMask::temporal(s, 1.0).unwrap(),
            PatternMask::textural(s, 1).unwrap(),
        ] {
            for q in 0..s.n() {
                for k in 0..s.n() {
                    assert!(p.contains(q, k));
                }
            }
            assert_eq!(p.kept_fraction(), 1.0);
        }
    }

    #[test]
    fn spatial_quarter_band_on_sixteen_frames() {
        let s = shape(16, 2, 2);
        let p = PatternMask::spatial(s, 0.25).unwrap();
        assert_eq!(p.half_width(), Some(4));
        assert_eq!(frame_pairs(16, 4), 124);
        assert_eq!(band_pair_count(16, 4), 124);
        assert_eq!(p.kept_pairs(), 124 * 4 * 4);
        assert!((p.kept_fraction() - 124.0 / 256.0).abs() < 1e-15);
        // Brute force over positions too.
        let brute = (0..s.n())
            .flat_map(|q| (0..s.n()).map(move |k| (q, k)))
            .filter(|&(q, k)| spatial_mask_contains(s, 0.25, q, k))
            .count();
        assert_eq!(brute as u64, p.kept_pairs());
    }

    #[test]
    fn spatial_quarter_band_on_four_frames() {
        let s = shape(4, 1, 1);
        let p = PatternMask::spatial(s, 0.25).unwrap();
        assert_eq!(p.half_width(), Some(1));
        let mut kept = vec![];
        for a in 0..4 {
            for b in 0..4 {
                if p.contains(a, b) {
                    kept.push((a, b));
                }
            }
        }
        assert_eq!(
            kept,
            vec![
                (0, 0),
                (0, 1),
                (1, 0),
                (1, 1),
                (1, 2),
                (2, 1),
                (2, 2),
                (2, 3),
                (3, 2),
                (3, 3)
            ]
        );
    }

    #[test]
    fn temporal_band_is_periodic_across_frame_pairs() {
        let s = shape(3, 4, 4);
        let p = PatternMask::temporal(s, 0.25).unwrap();
        assert_eq!(p.half_width(), Some(4));
        let fl = s.frame_len();
        for fq in 0..3 {
            for fk in 0..3 {
                for a in 0..fl {
                    for b in 0..fl {
                        assert_eq!(
                            p.contains(fq * fl + a, fk * fl + b),
                            p.contains(a, b),
                            "tile ({fq},{fk}) differs"
                        );
                    }
                }
            }
        }
        for a in 0..s.n() {
            for b in 0..s.n() {
                if s.spatial(a) == s.spatial(b) {
                    assert!(temporal_mask_contains(s, 0.01, a, b));
                }
            }
        }
    }

    #[test]
    fn checkerboard_examples() {
        let cb = checkerboard_indices(shape(1, 5, 7), 1).unwrap();
        assert_eq!(cb.len(), 35);

        let cb = checkerboard_indices(shape(2, 30, 40), 2).unwrap();
        assert_eq!(cb.len(), 600);
        assert_eq!(cb.key_fraction(), 0.5);

        let cb = checkerboard_indices(shape(1, 3, 3), 2).unwrap();
        // cells (0,0),(0,2),(1,1),(2,0),(2,2)
        assert_eq!(cb.indices(), &[0, 2, 4, 6, 8]);

        assert_eq!(
            checkerboard_indices(shape(1, 3, 8), 4).unwrap_err(),
            Error::DegenerateStride { tau: 4, h: 3, w: 8 }
        );
        assert!(PatternMask::textural(shape(1, 3, 8), 0).is_err());
    }

    #[test]
    fn checkerboard_counts_match_closed_form() {
        for h in 1..12 {
            for w in 1..12 {
                for tau in 1..=h.min(w) {
                    let cb = checkerboard_indices(shape(1, h, w), tau).unwrap();
                    assert_eq!(cb.len(), checkerboard_count(h, w, tau));
                    assert!(cb.indices().windows(2).all(|x| x[0] < x[1]));
                }
            }
        }
    }

    #[test]
    fn textural_kept_fraction() {
        let p = PatternMask::textural(shape(4, 30, 40), 2).unwrap();
        assert_eq!(p.kept_fraction(), 0.5);
    }

    #[test]
    fn invalid_bandwidth_rejected() {
        let s = shape(2, 2, 2);
        assert!(PatternMask::spatial(s, 0.0).is_err());
        assert!(PatternMask::temporal(s, 1.5).is_err());
        assert!(PatternMask::spatial(s, f64::NAN).is_err());
    }

    #[test]
    fn spatial_fraction_converges_to_continuous_limit() {
        let p = PatternMask::spatial(shape(64, 1, 1), 0.25).unwrap();
        let limit = 2.0 * 0.25 - 0.25 * 0.25;
        assert!((p.kept_fraction() - limit).abs() < 0.02);
    }

    fn brute_block_state(p: &PatternMask, bm: &BlockMask, qb: usize, kb: usize) -> BlockState {
        let (q0, q1) = bm.block_range(qb);
        let (k0, k1) = bm.block_range(kb);
        let mut kept = 0;
        for q in q0..q1 {
            for k in k0..k1 {
                kept += p.contains(q, k) as usize;
            }
        }
        if kept == 0 {
            BlockState::Empty
        } else if kept == (q1 - q0) * (k1 - k0) {
            BlockState::Full
        } else {
            BlockState::Partial
        }
    }

    #[test]
    fn full_band_blocks_are_all_full() {
        let p = PatternMask::spatial(shape(3, 8, 8), 1.0).unwrap();
        let bm = build_block_mask(&p, 16).unwrap();
        assert_eq!(bm.count(BlockState::Full), bm.blocks() * bm.blocks());
    }

    #[test]
    fn temporal_block_grid_inherits_periodicity() {
        let s = shape(4, 8, 8);
        let p = PatternMask::temporal(s, 0.25).unwrap();
        let bm = build_block_mask(&p, 16).unwrap();
        let per = s.frame_len() / 16;
        for qb in 0..bm.blocks() {
            for kb in 0..bm.blocks() {
                assert_eq!(bm.state(qb, kb), bm.state(qb % per, kb % per));
            }
        }
    }

    #[test]
    fn block_states_are_tight() {
        let s = shape(3, 8, 8);
        for p in [
            PatternMask::spatial(s, 0.3).unwrap(),
            PatternMask::temporal(s, 0.2).unwrap(),
            PatternMask::textural(s, 3).unwrap(),
        ] {
            for bs in [16, 32, 64] {
                let bm = build_block_mask(&p, bs).unwrap();
                for qb in 0..bm.blocks() {
                    for kb in 0..bm.blocks() {
                        assert_eq!(bm.state(qb, kb), brute_block_state(&p, &bm, qb, kb));
                    }
                }
            }
        }
    }

    #[test]
    fn non_power_of_two_block_rejected() {
        let p = PatternMask::spatial(shape(2, 2, 2), 0.5).unwrap();
        assert!(build_block_mask(&p, 24).is_err());
    }

    fn arb_band() -> impl Strategy<Value = (LatentShape, bool, f64)> {
        (1usize..6, 1usize..6, 1usize..6, any::<bool>(), 0.01f64..=1.0)
            .prop_map(|(t, h, w, sp, b)| (LatentShape::new(t, h, w).unwrap(), sp, b))
    }

    fn make_band(s: LatentShape, spatial: bool, b: f64) -> PatternMask {
        if spatial {
            PatternMask::spatial(s, b).unwrap()
        } else {
            PatternMask::temporal(s, b).unwrap()
        }
    }

    proptest! {
        #[test]
        fn bands_are_symmetric_and_reflexive((s, sp, b) in arb_band()) {
            let p = make_band(s, sp, b);
            for q in 0..s.n() {
                prop_assert!(p.contains(q, q));
                for k in 0..s.n() {
                    prop_assert_eq!(p.contains(q, k), p.contains(k, q));
                }
            }
        }

        #[test]
        fn bands_are_monotone_in_bandwidth((s, sp, b1) in arb_band(), b2 in 0.01f64..=1.0) {
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let (small, big) = (make_band(s, sp, lo), make_band(s, sp, hi));
            for q in 0..s.n() {
                for k in 0..s.n() {
                    prop_assert!(!small.contains(q, k) || big.contains(q, k));
                }
            }
        }

        #[test]
        fn checkerboard_count_is_monotone_in_stride(h in 1usize..40, w in 1usize..40) {
            let max = h.min(w);
            for tau in 1..max {
                prop_assert!(checkerboard_count(h, w, tau + 1) <= checkerboard_count(h, w, tau));
            }
        }

        #[test]
        fn kept_pairs_match_brute_force((s, sp, b) in arb_band()) {
            let p = make_band(s, sp, b);
            let brute = (0..s.n())
                .flat_map(|q| (0..s.n()).map(move |k| (q, k)))
                .filter(|&(q, k)| p.contains(q, k))
                .count() as u64;
            prop_assert_eq!(brute, p.kept_pairs());
        }

        #[test]
        fn block_reconstruction_is_exact((s, sp, b) in arb_band(), bs_exp in 0u32..4) {
            let p = make_band(s, sp, b);
            let bm = build_block_mask(&p, 1 << bs_exp).unwrap();
            for q in 0..s.n() {
                for k in 0..s.n() {
                    prop_assert_eq!(bm.keeps(q, k), p.contains(q, k));
                }
            }
        }
    }
}
