//! Sparse attention execution and FLOP accounting.
//!
//! Band heads run a tiled kernel over the non-empty tiles of a [`BlockMask`]
//! with a streaming (running max / running sum) softmax per query row.
//! Partial tiles apply the element mask inside the tile, so the result is
//! the masked dense attention up to floating-point reordering. Textural heads
//! physically gather the checkerboard keys and values and run the same
//! kernel densely over the shorter key sequence.
//!
//! Cost model: a computed `(q, k)` pair costs `4d + 5` FLOPs, `2d` for the
//! score, `2d` for the value product and 5 for the softmax.

use alloc::vec;
use alloc::vec::Vec;

use crate::arm::{HeadClass, HeadDecision};
use crate::math::{dense_attention, rel_l2_error, AdditiveMask, AttentionHead, Matrix};
use crate::patterns::{build_block_mask, BlockMask, BlockState, CheckerboardSet, LatentShape, PatternKind, PatternMask};
use crate::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const DEFAULT_DENSE_PREFIX: f64 = 0.1;
pub const SOFTMAX_FLOPS_PER_PAIR: u64 = 5;

/// FLOPs of `pairs` computed score entries at head dimension `d`.
#[inline]
pub fn pair_flops(pairs: u64, d: usize) -> u64 {
    pairs * (4 * d as u64 + SOFTMAX_FLOPS_PER_PAIR)
}

/// Score-matmul FLOPs alone (`2·pairs·d`).
#[inline]
pub fn score_flops(pairs: u64, d: usize) -> u64 {
    2 * pairs * d as u64
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunMetrics {
    pub flops_dense: u64,
    /// Only the kept pairs.
    pub flops_sparse: u64,
    /// Every pair of every computed tile.
    pub flops_sparse_block: u64,
    pub kept_fraction: f64,
    /// Relative L2 distance to full dense attention; 0 when not measured.
    pub rel_l2_error: f64,
    pub wall_ns_dense: u64,
    pub wall_ns_sparse: u64,
}

impl RunMetrics {
    /// Sums counts and timings, keeps the largest error and recomputes the
    /// kept fraction from the summed FLOPs. Associative and commutative.
    pub fn merge(&self, other: &RunMetrics) -> RunMetrics {
        let flops_dense = self.flops_dense + other.flops_dense;
        let flops_sparse = self.flops_sparse + other.flops_sparse;
        RunMetrics {
            flops_dense,
            flops_sparse,
            flops_sparse_block: self.flops_sparse_block + other.flops_sparse_block,
            kept_fraction: if flops_dense == 0 {
                0.0
            } else {
                flops_sparse as f64 / flops_dense as f64
            },
            rel_l2_error: self.rel_l2_error.max(other.rel_l2_error),
            wall_ns_dense: self.wall_ns_dense + other.wall_ns_dense,
            wall_ns_sparse: self.wall_ns_sparse + other.wall_ns_sparse,
        }
    }

    fn from_stats(stats: TileStats, n_q: usize, n_k: usize, d: usize, kept_fraction: f64) -> Self {
        RunMetrics {
            flops_dense: pair_flops((n_q * n_k) as u64, d),
            flops_sparse: pair_flops(stats.kept_pairs, d),
            flops_sparse_block: pair_flops(stats.computed_pairs, d),
            kept_fraction,
            ..RunMetrics::default()
        }
    }

    fn dense(n: usize, d: usize) -> Self {
        let f = pair_flops((n * n) as u64, d);
        RunMetrics {
            flops_dense: f,
            flops_sparse: f,
            flops_sparse_block: f,
            kept_fraction: 1.0,
            ..RunMetrics::default()
        }
    }

    /// Sets the error against a full dense reference output.
    pub fn measure_error(&mut self, output: &Matrix, reference: &Matrix) {
        self.rel_l2_error = rel_l2_error(output, reference);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Speedup {
    /// Dense over block-granular FLOPs.
    pub flops: f64,
    /// Dense over element-exact FLOPs.
    pub flops_exact: f64,
    /// Dense over sparse wall-clock, if both were timed.
    pub wall: Option<f64>,
}

pub fn estimate_speedup(metrics: &RunMetrics) -> Result<Speedup> {
    if metrics.flops_dense == 0 {
        return Err(Error::invalid("metrics", "dense FLOP count is zero"));
    }
    let ratio = |a: u64, b: u64| if b == 0 { f64::INFINITY } else { a as f64 / b as f64 };
    let wall = (metrics.wall_ns_dense > 0 && metrics.wall_ns_sparse > 0)
        .then(|| ratio(metrics.wall_ns_dense, metrics.wall_ns_sparse));
    Ok(Speedup {
        flops: ratio(metrics.flops_dense, metrics.flops_sparse_block),
        flops_exact: ratio(metrics.flops_dense, metrics.flops_sparse),
        wall,
    })
}

/// Pair counts observed by the tiled kernel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TileStats {
    pub kept_pairs: u64,
    pub computed_pairs: u64,
}

impl core::ops::Add for TileStats {
    type Output = TileStats;

    fn add(self, o: TileStats) -> TileStats {
        TileStats {
            kept_pairs: self.kept_pairs + o.kept_pairs,
            computed_pairs: self.computed_pairs + o.computed_pairs,
        }
    }
}

/// Query rows per micro-kernel step.
const ROWS: usize = 8;
/// SIMD-friendly chunk width for keys and the head dimension.
const LANES: usize = 8;

#[inline]
fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

/// Keys and values of one key block in `f64`, zero-padded to whole lanes.
/// Keys are stored transposed (`d_pad × len_pad`).
#[derive(Debug, Clone)]
struct KeyTile {
    start: usize,
    len: usize,
    len_pad: usize,
    kt: Vec<f64>,
    v: Vec<f64>,
}

fn key_tiles(k: &Matrix, v: &Matrix, block_size: usize, d_pad: usize) -> Vec<KeyTile> {
    let (n, d) = (k.rows(), k.cols());
    (0..n.div_ceil(block_size))
        .map(|b| {
            let start = b * block_size;
            let len = block_size.min(n - start);
            let len_pad = round_up(len, LANES);
            let mut kt = vec![0.0f64; d_pad * len_pad];
            let mut vv = vec![0.0f64; len_pad * d_pad];
            for j in 0..len {
                let (krow, vrow) = (k.row(start + j), v.row(start + j));
                for c in 0..d {
                    kt[c * len_pad + j] = f64::from(krow[c]);
                    vv[j * d_pad + c] = f64::from(vrow[c]);
                }
            }
            KeyTile {
                start,
                len,
                len_pad,
                kt,
                v: vv,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
struct BandSparsity<'a> {
    blocks: &'a BlockMask,
    coords: Vec<u32>,
    half_width: u32,
}

/// Streaming-softmax attention over key tiles, optionally restricted to the
/// non-empty tiles of a band [`BlockMask`].
///
/// Query blocks are independent; [`TiledAttention::compute_block`] may be
/// called for different blocks from different threads.
#[derive(Debug, Clone)]
pub struct TiledAttention<'a> {
    q: &'a Matrix,
    d_pad: usize,
    tiles: Vec<KeyTile>,
    block_size: usize,
    band: Option<BandSparsity<'a>>,
}

const MAGIC_ROUND: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

/// `exp(x)` for `x ≤ 0`, branch-free so it vectorizes. Arguments below
/// −708 (including −∞) return 0. Relative error is about 1e-16.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    let xc = if x < -708.0 { -708.0 } else { x };
    let t = xc * core::f64::consts::LOG2_E + MAGIC_ROUND;
    let k = t - MAGIC_ROUND;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    // Taylor series to r^12; |r| ≤ ln2/2 keeps the tail below 2e-16.
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let ki = (t.to_bits() as i64).wrapping_sub(MAGIC_ROUND.to_bits() as i64);
    let scale = f64::from_bits(((ki + 1023) as u64) << 52);
    if x < -708.0 {
        0.0
    } else {
        p * scale
    }
}

#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
#[inline(always)]
fn lane_max(xs: &[f64]) -> f64 {
    let mut m = [f64::NEG_INFINITY; LANES];
    for chunk in xs.chunks_exact(LANES) {
        for l in 0..LANES {
            m[l] = if chunk[l] > m[l] { chunk[l] } else { m[l] };
        }
    }
    m.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Replaces each score by `exp(score − max)` and returns the row sum.
#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
#[inline(always)]
fn exp_shift_sum(xs: &mut [f64], max: f64) -> f64 {
    let mut s = [0.0f64; LANES];
    for chunk in xs.chunks_exact_mut(LANES) {
        for l in 0..LANES {
            chunk[l] = exp_nonpositive(chunk[l] - max);
            s[l] += chunk[l];
        }
    }
    s.iter().sum()
}

/// `s[r][j] = Σ_c q[r][c] · kt[c][j]` for `ROWS` rows and one lane of keys.
#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
#[inline(always)]
fn score_lane(q: &[f64], d_pad: usize, kt: &[f64], len_pad: usize, j0: usize) -> [[f64; LANES]; ROWS] {
    let mut s = [[0.0f64; LANES]; ROWS];
    for c in 0..d_pad {
        let k: &[f64; LANES] = kt[c * len_pad + j0..c * len_pad + j0 + LANES].try_into().unwrap();
        for r in 0..ROWS {
            let qc = q[r * d_pad + c];
            for l in 0..LANES {
                s[r][l] += qc * k[l];
            }
        }
    }
    s
}

/// `acc[r][c0..c0+LANES] += Σ_j p[r][j] · v[j][c0..c0+LANES]`.
#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
#[inline(always)]
fn value_lane(p: &[f64], len_pad: usize, v: &[f64], d_pad: usize, c0: usize, acc: &mut [f64]) {
    let mut a = [[0.0f64; LANES]; ROWS];
    for (r, ar) in a.iter_mut().enumerate() {
        ar.copy_from_slice(&acc[r * d_pad + c0..r * d_pad + c0 + LANES]);
    }
    for j in 0..len_pad {
        let vj: &[f64; LANES] = v[j * d_pad + c0..j * d_pad + c0 + LANES].try_into().unwrap();
        for r in 0..ROWS {
            let pr = p[r * len_pad + j];
            for l in 0..LANES {
                a[r][l] += pr * vj[l];
            }
        }
    }
    for (r, ar) in a.iter().enumerate() {
        acc[r * d_pad + c0..r * d_pad + c0 + LANES].copy_from_slice(ar);
    }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
use simd::{exp_shift_sum, lane_max, score_lane, value_lane};

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
mod simd {
    use super::{LANES, LN2_HI, LN2_LO, MAGIC_ROUND, ROWS};
    use core::arch::x86_64::*;

    #[inline(always)]
    pub(super) fn score_lane(q: &[f64], d_pad: usize, kt: &[f64], len_pad: usize, j0: usize) -> [[f64; LANES]; ROWS] {
        assert!(q.len() >= ROWS * d_pad && j0 + LANES <= len_pad && kt.len() >= d_pad * len_pad);
        let mut out = [[0.0f64; LANES]; ROWS];
        // SAFETY: the assertion bounds every load; avx512f is enabled at compile time.
        unsafe {
            let mut s = [_mm512_setzero_pd(); ROWS];
            for c in 0..d_pad {
                let k = _mm512_loadu_pd(kt.as_ptr().add(c * len_pad + j0));
                for (r, sr) in s.iter_mut().enumerate() {
                    *sr = _mm512_fmadd_pd(_mm512_set1_pd(*q.get_unchecked(r * d_pad + c)), k, *sr);
                }
            }
            for (o, sr) in out.iter_mut().zip(s) {
                _mm512_storeu_pd(o.as_mut_ptr(), sr);
            }
        }
        out
    }

    #[inline(always)]
    pub(super) fn value_lane(p: &[f64], len_pad: usize, v: &[f64], d_pad: usize, c0: usize, acc: &mut [f64]) {
        assert!(p.len() >= ROWS * len_pad && c0 + LANES <= d_pad);
        assert!(v.len() >= len_pad * d_pad && acc.len() >= ROWS * d_pad);
        // SAFETY: as above.
        unsafe {
            let mut a = [_mm512_setzero_pd(); ROWS];
            for (r, ar) in a.iter_mut().enumerate() {
                *ar = _mm512_loadu_pd(acc.as_ptr().add(r * d_pad + c0));
            }
            for j in 0..len_pad {
                let vj = _mm512_loadu_pd(v.as_ptr().add(j * d_pad + c0));
                for (r, ar) in a.iter_mut().enumerate() {
                    *ar = _mm512_fmadd_pd(_mm512_set1_pd(*p.get_unchecked(r * len_pad + j)), vj, *ar);
                }
            }
            for (r, ar) in a.iter().enumerate() {
                _mm512_storeu_pd(acc.as_mut_ptr().add(r * d_pad + c0), *ar);
            }
        }
    }

    #[inline(always)]
    pub(super) fn lane_max(xs: &[f64]) -> f64 {
        assert!(xs.len().is_multiple_of(LANES));
        // SAFETY: every load lies inside `xs`.
        unsafe {
            let mut m = _mm512_set1_pd(f64::NEG_INFINITY);
            for c in xs.chunks_exact(LANES) {
                m = _mm512_max_pd(m, _mm512_loadu_pd(c.as_ptr()));
            }
            _mm512_reduce_max_pd(m)
        }
    }

    /// Vector form of [`super::exp_nonpositive`] applied to `x − max`,
    /// returning the sum.
    #[inline(always)]
    pub(super) fn exp_shift_sum(xs: &mut [f64], max: f64) -> f64 {
        assert!(xs.len().is_multiple_of(LANES));
        const C: [f64; 13] = [
            1.0 / 479_001_600.0,
            1.0 / 39_916_800.0,
            1.0 / 3_628_800.0,
            1.0 / 362_880.0,
            1.0 / 40_320.0,
            1.0 / 5_040.0,
            1.0 / 720.0,
            1.0 / 120.0,
            1.0 / 24.0,
            1.0 / 6.0,
            0.5,
            1.0,
            1.0,
        ];
        // SAFETY: every load and store lies inside `xs`.
        unsafe {
            let shift = _mm512_set1_pd(max);
            let floor = _mm512_set1_pd(-708.0);
            let magic = _mm512_set1_pd(MAGIC_ROUND);
            let magic_bits = _mm512_set1_epi64(MAGIC_ROUND.to_bits() as i64);
            let bias = _mm512_set1_epi64(1023);
            let mut sum = _mm512_setzero_pd();
            for c in xs.chunks_exact_mut(LANES) {
                let x = _mm512_sub_pd(_mm512_loadu_pd(c.as_ptr()), shift);
                let live = _mm512_cmp_pd_mask::<_CMP_GE_OQ>(x, floor);
                let xc = _mm512_max_pd(x, floor);
                let t = _mm512_fmadd_pd(xc, _mm512_set1_pd(core::f64::consts::LOG2_E), magic);
                let k = _mm512_sub_pd(t, magic);
                let r = _mm512_fnmadd_pd(k, _mm512_set1_pd(LN2_HI), xc);
                let r = _mm512_fnmadd_pd(k, _mm512_set1_pd(LN2_LO), r);
                let mut p = _mm512_set1_pd(C[0]);
                for &coef in &C[1..] {
                    p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(coef));
                }
                let ki = _mm512_sub_epi64(_mm512_castpd_si512(t), magic_bits);
                let scale = _mm512_castsi512_pd(_mm512_slli_epi64::<52>(_mm512_add_epi64(ki, bias)));
                let e = _mm512_maskz_mul_pd(live, p, scale);
                _mm512_storeu_pd(c.as_mut_ptr(), e);
                sum = _mm512_add_pd(sum, e);
            }
            _mm512_reduce_add_pd(sum)
        }
    }
}

impl<'a> TiledAttention<'a> {
    /// Every query against every key.
    pub fn dense(q: &'a Matrix, k: &Matrix, v: &Matrix, block_size: usize) -> Result<Self> {
        if k.rows() != v.rows() || q.cols() != k.cols() || k.cols() != v.cols() {
            return Err(Error::ShapeMismatch("q/k/v dimension mismatch"));
        }
        if k.rows() == 0 {
            return Err(Error::EmptyAttentionRow { row: 0 });
        }
        if block_size == 0 {
            return Err(Error::invalid("block_size", "must be positive"));
        }
        let d_pad = round_up(q.cols(), LANES);
        Ok(Self {
            q,
            d_pad,
            tiles: key_tiles(k, v, block_size, d_pad),
            block_size,
            band: None,
        })
    }

    /// Band-sparse attention of `head` over the tiles of `blocks`.
    pub fn band(head: &'a AttentionHead, blocks: &'a BlockMask) -> Result<Self> {
        let pattern = blocks.pattern();
        let half_width = pattern
            .half_width()
            .ok_or(Error::invalid("pattern", "tiled band attention needs a band pattern"))?;
        if pattern.shape().n() != head.n() {
            return Err(Error::ShapeMismatch("pattern shape does not match head length"));
        }
        let shape = pattern.shape();
        let coords = (0..head.n())
            .map(|p| match pattern.kind() {
                PatternKind::Spatial => shape.frame(p) as u32,
                _ => shape.spatial(p) as u32,
            })
            .collect();
        let d_pad = round_up(head.d(), LANES);
        Ok(Self {
            q: head.q(),
            d_pad,
            tiles: key_tiles(head.k(), head.v(), blocks.block_size(), d_pad),
            block_size: blocks.block_size(),
            band: Some(BandSparsity {
                blocks,
                coords,
                half_width: half_width.min(u32::MAX as usize) as u32,
            }),
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn query_blocks(&self) -> usize {
        self.q.rows().div_ceil(self.block_size)
    }

    pub fn d(&self) -> usize {
        self.q.cols()
    }

    /// Query rows `[start, end)` of block `qb`.
    pub fn query_range(&self, qb: usize) -> (usize, usize) {
        let start = qb * self.block_size;
        (start, (start + self.block_size).min(self.q.rows()))
    }

    /// Output rows of query block `qb` into `out` (`rows × d`, row-major).
    pub fn compute_block(&self, qb: usize, out: &mut [f32]) -> Result<TileStats> {
        let (d, d_pad) = (self.d(), self.d_pad);
        let (q0, q1) = self.query_range(qb);
        let rows = q1 - q0;
        assert_eq!(out.len(), rows * d, "output slice must hold the block's rows");
        let rows_pad = round_up(rows, ROWS);
        let scale = 1.0 / libm::sqrt(d as f64);

        let mut qs = vec![0.0f64; rows_pad * d_pad];
        for r in 0..rows {
            for (x, &y) in qs[r * d_pad..r * d_pad + d].iter_mut().zip(self.q.row(q0 + r)) {
                *x = f64::from(y) * scale;
            }
        }
        let mut acc = vec![0.0f64; rows_pad * d_pad];
        let mut row_max = vec![f64::NEG_INFINITY; rows_pad];
        let mut row_sum = vec![0.0f64; rows_pad];
        let max_len_pad = round_up(self.block_size, LANES);
        let mut p = vec![0.0f64; ROWS * max_len_pad];
        let mut stats = TileStats::default();

        let mut visit = |tile: &KeyTile, partial: bool, stats: &mut TileStats| {
            let (len, len_pad) = (tile.len, tile.len_pad);
            stats.computed_pairs += (rows * len) as u64;
            for g in (0..rows_pad).step_by(ROWS) {
                let qg = &qs[g * d_pad..(g + ROWS) * d_pad];
                let pg = &mut p[..ROWS * len_pad];
                for j0 in (0..len_pad).step_by(LANES) {
                    let s = score_lane(qg, d_pad, &tile.kt, len_pad, j0);
                    for r in 0..ROWS {
                        pg[r * len_pad + j0..r * len_pad + j0 + LANES].copy_from_slice(&s[r]);
                    }
                }
                let mut any = false;
                for r in 0..ROWS.min(rows.saturating_sub(g)) {
                    let pr = &mut pg[r * len_pad..(r + 1) * len_pad];
                    pr[len..].iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
                    let mut kept = len;
                    if partial {
                        let band = self.band.as_ref().expect("partial tiles need a band");
                        let cq = band.coords[q0 + g + r];
                        let ck = &band.coords[tile.start..tile.start + len];
                        kept = 0;
                        for (x, &c) in pr.iter_mut().zip(ck) {
                            if cq.abs_diff(c) > band.half_width {
                                *x = f64::NEG_INFINITY;
                            } else {
                                kept += 1;
                            }
                        }
                    }
                    stats.kept_pairs += kept as u64;
                    if kept == 0 {
                        pr.iter_mut().for_each(|x| *x = 0.0);
                        continue;
                    }
                    any = true;
                    let i = g + r;
                    let tile_max = lane_max(pr);
                    let new_max = row_max[i].max(tile_max);
                    if row_max[i] != f64::NEG_INFINITY && row_max[i] != new_max {
                        let rescale = exp_nonpositive(row_max[i] - new_max);
                        row_sum[i] *= rescale;
                        acc[i * d_pad..(i + 1) * d_pad].iter_mut().for_each(|x| *x *= rescale);
                    }
                    row_max[i] = new_max;
                    row_sum[i] += exp_shift_sum(pr, new_max);
                }
                // Padding rows never contribute.
                for r in rows.saturating_sub(g).min(ROWS)..ROWS {
                    pg[r * len_pad..(r + 1) * len_pad].iter_mut().for_each(|x| *x = 0.0);
                }
                if !any {
                    continue;
                }
                let ag = &mut acc[g * d_pad..(g + ROWS) * d_pad];
                for c0 in (0..d_pad).step_by(LANES) {
                    value_lane(pg, len_pad, &tile.v, d_pad, c0, ag);
                }
            }
        };

        match &self.band {
            None => {
                for tile in &self.tiles {
                    visit(tile, false, &mut stats);
                }
            }
            Some(band) => {
                for (kb, st) in band.blocks.active_in_row(qb) {
                    visit(&self.tiles[kb], st == BlockState::Partial, &mut stats);
                }
            }
        }

        for r in 0..rows {
            if row_sum[r] == 0.0 {
                return Err(Error::EmptyAttentionRow { row: q0 + r });
            }
            let inv = 1.0 / row_sum[r];
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(&acc[r * d_pad..r * d_pad + d]) {
                *o = (x * inv) as f32;
            }
        }
        Ok(stats)
    }

    /// All query blocks, sequentially.
    pub fn run(&self) -> Result<(Matrix, TileStats)> {
        let d = self.d();
        let mut out = Matrix::zeros(self.q.rows(), d);
        let mut stats = TileStats::default();
        let chunk = self.block_size * d;
        for (qb, rows) in out.as_mut_slice().chunks_mut(chunk).enumerate() {
            stats = stats + self.compute_block(qb, rows)?;
        }
        Ok((out, stats))
    }
}

/// Band-sparse attention for a spatial or temporal head.
pub fn run_band_attention(
    head: &AttentionHead,
    pattern: &PatternMask,
    block_size: usize,
) -> Result<(Matrix, RunMetrics)> {
    if pattern.kind() == PatternKind::Textural {
        return Err(Error::invalid("pattern", "band attention needs a spatial or temporal pattern"));
    }
    let blocks = build_block_mask(pattern, block_size)?;
    let kernel = TiledAttention::band(head, &blocks)?;
    let (out, stats) = kernel.run()?;
    let metrics = RunMetrics::from_stats(stats, head.n(), head.n(), head.d(), pattern.kept_fraction());
    Ok((out, metrics))
}

/// Keys and values of the checkerboard positions of every frame.
pub fn gather_checkerboard(head: &AttentionHead, cb: &CheckerboardSet) -> Result<(Matrix, Matrix)> {
    if cb.shape().n() != head.n() {
        return Err(Error::ShapeMismatch("checkerboard shape does not match head length"));
    }
    head.gather_keys(&cb.key_positions())
}

/// Metrics of attending all `n` queries to `kept_keys` keys.
pub fn textural_metrics(n: usize, kept_keys: usize, d: usize) -> RunMetrics {
    let stats = TileStats {
        kept_pairs: (n * kept_keys) as u64,
        computed_pairs: (n * kept_keys) as u64,
    };
    RunMetrics::from_stats(stats, n, n, d, kept_keys as f64 / n as f64)
}

pub fn run_textural_attention_with_block(
    head: &AttentionHead,
    cb: &CheckerboardSet,
    block_size: usize,
) -> Result<(Matrix, RunMetrics)> {
    let (k, v) = gather_checkerboard(head, cb)?;
    let kernel = TiledAttention::dense(head.q(), &k, &v, block_size)?;
    let (out, stats) = kernel.run()?;
    let kept = k.rows();
    let metrics = RunMetrics::from_stats(stats, head.n(), head.n(), head.d(), kept as f64 / head.n() as f64);
    Ok((out, metrics))
}

/// Reduced-KV attention for a textural head.
pub fn run_textural_attention(head: &AttentionHead, cb: &CheckerboardSet) -> Result<(Matrix, RunMetrics)> {
    run_textural_attention_with_block(head, cb, DEFAULT_BLOCK_SIZE)
}

/// How one head executes in sparse steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadAssignment {
    pub class: HeadClass,
    pub bandwidth: Option<f64>,
    pub tau: Option<usize>,
}

impl HeadAssignment {
    pub fn band(class: HeadClass, bandwidth: f64) -> Self {
        Self {
            class,
            bandwidth: Some(bandwidth),
            tau: None,
        }
    }

    pub fn textural(tau: usize) -> Self {
        Self {
            class: HeadClass::Textural,
            bandwidth: None,
            tau: Some(tau),
        }
    }

    /// The pattern this head runs with on `shape`.
    pub fn pattern(&self, shape: LatentShape) -> Result<PatternMask> {
        match self.class {
            HeadClass::Textural => PatternMask::textural(shape, self.tau.ok_or(Error::invalid("tau", "missing"))?),
            kind => PatternMask::band(kind, shape, self.bandwidth.ok_or(Error::invalid("bandwidth", "missing"))?),
        }
    }
}

impl From<&HeadDecision> for HeadAssignment {
    fn from(d: &HeadDecision) -> Self {
        HeadAssignment {
            class: d.report.head_class,
            bandwidth: d.bandwidth,
            tau: d.tau,
        }
    }
}

/// Per-head assignments plus the dense-prefix schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePlan {
    pub shape: LatentShape,
    pub heads: Vec<HeadAssignment>,
    /// Leading fraction of steps computed densely.
    pub dense_prefix: f64,
    pub block_size: usize,
    /// Compare each sparse output with full dense attention.
    pub measure_error: bool,
}

impl SparsePlan {
    pub fn new(shape: LatentShape, heads: Vec<HeadAssignment>, dense_prefix: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&dense_prefix) {
            return Err(Error::invalid("dense_prefix", "must lie in [0, 1]"));
        }
        Ok(Self {
            shape,
            heads,
            dense_prefix,
            block_size: DEFAULT_BLOCK_SIZE,
            measure_error: false,
        })
    }

    /// `⌈prefix · total_steps⌉`.
    pub fn dense_steps(&self, total_steps: usize) -> usize {
        // The epsilon absorbs products like 0.1·50 landing just above 5.
        let x = self.dense_prefix * total_steps as f64 - 1e-9;
        (libm::ceil(x).max(0.0) as usize).min(total_steps)
    }

    pub fn is_dense_step(&self, step: usize, total_steps: usize) -> bool {
        step < self.dense_steps(total_steps)
    }
}

#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub outputs: Vec<Matrix>,
    pub per_head: Vec<RunMetrics>,
    pub total: RunMetrics,
    pub dense_step: bool,
}

/// Runs one head as assigned (sparse path only).
pub fn run_head(head: &AttentionHead, shape: LatentShape, assignment: &HeadAssignment, block_size: usize) -> Result<(Matrix, RunMetrics)> {
    let pattern = assignment.pattern(shape)?;
    match assignment.class {
        HeadClass::Textural => {
            let tau = pattern.stride().expect("textural pattern has a stride");
            let cb = crate::patterns::checkerboard_indices(shape, tau)?;
            run_textural_attention_with_block(head, &cb, block_size)
        }
        _ => run_band_attention(head, &pattern, block_size),
    }
}

/// Executes step `step` of `total_steps` for every head.
pub fn run_plan(heads: &[AttentionHead], plan: &SparsePlan, step: usize, total_steps: usize) -> Result<PlanOutput> {
    if heads.len() != plan.heads.len() {
        return Err(Error::ShapeMismatch("plan and head list differ in length"));
    }
    if heads.iter().any(|h| h.n() != plan.shape.n()) {
        return Err(Error::ShapeMismatch("head length != t*h*w"));
    }
    let dense_step = plan.is_dense_step(step, total_steps);
    let mut outputs = Vec::with_capacity(heads.len());
    let mut per_head = Vec::with_capacity(heads.len());
    for (head, assignment) in heads.iter().zip(&plan.heads) {
        let n = head.n();
        let (out, metrics) = if dense_step {
            (dense_attention(head, &AdditiveMask::init(n))?, RunMetrics::dense(n, head.d()))
        } else {
            let (out, mut metrics) = run_head(head, plan.shape, assignment, plan.block_size)?;
            if plan.measure_error {
                let reference = dense_attention(head, &AdditiveMask::init(n))?;
                metrics.measure_error(&out, &reference);
            }
            (out, metrics)
        };
        outputs.push(out);
        per_head.push(metrics);
    }
    let total = per_head.iter().fold(RunMetrics::default(), |a, m| a.merge(m));
    Ok(PlanOutput {
        outputs,
        per_head,
        total,
        dense_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::attention_against;
    use crate::patterns::checkerboard_indices;
    use crate::workload::Rng;

    fn shape(t: usize, h: usize, w: usize) -> LatentShape {
        LatentShape::new(t, h, w).unwrap()
    }

    fn random_head(n: usize, d: usize, seed: u64) -> AttentionHead {
        let mut rng = Rng::new(seed);
        let mut m = || Matrix::from_fn(n, d, |_, _| (1.5 * rng.normal()) as f32);
        let (q, k, v) = (m(), m(), m());
        AttentionHead::new(q, k, v).unwrap()
    }

    #[test]
    fn kernel_exp_matches_libm() {
        let mut x = 0.0f64;
        while x > -720.0 {
            let (got, want) = (exp_nonpositive(x), libm::exp(x));
            if x < -708.0 {
                assert_eq!(got, 0.0);
            } else {
                assert!(((got - want) / want).abs() < 4e-16, "x={x} got={got} want={want}");
            }
            x -= 0.0137;
        }
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert_eq!(exp_nonpositive(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn vector_exp_matches_libm() {
        let mut xs: Vec<f64> = (0..4096).map(|i| 3.0 - 0.18 * i as f64).collect();
        xs.extend([f64::NEG_INFINITY; 8]);
        let want: Vec<f64> = xs.iter().map(|&x| if x - 3.0 < -708.0 { 0.0 } else { libm::exp(x - 3.0) }).collect();
        let sum = exp_shift_sum(&mut xs, 3.0);
        for (&got, &w) in xs.iter().zip(&want) {
            if w == 0.0 {
                assert_eq!(got, 0.0);
            } else {
                assert!(((got - w) / w).abs() < 1e-15, "got={got} want={w}");
            }
        }
        let ws: f64 = want.iter().sum();
        assert!((sum - ws).abs() < 1e-14 * ws);
        assert_eq!(lane_max(&xs), 1.0);
    }

    #[test]
    fn full_band_matches_dense() {
        let s = shape(4, 4, 4);
        let head = random_head(s.n(), 8, 1);
        let p = PatternMask::spatial(s, 1.0).unwrap();
        let (out, m) = run_band_attention(&head, &p, 16).unwrap();
        let oracle = dense_attention(&head, &AdditiveMask::init(s.n())).unwrap();
        assert!(rel_l2_error(&out, &oracle) < 1e-5);
        assert_eq!(m.flops_sparse, m.flops_dense);
        assert_eq!(m.flops_sparse_block, m.flops_dense);
    }

    #[test]
    fn spatial_band_matches_masked_oracle() {
        let s = shape(16, 8, 8);
        let head = random_head(s.n(), 8, 2);
        let p = PatternMask::spatial(s, 0.25).unwrap();
        let (out, m) = run_band_attention(&head, &p, 64).unwrap();
        let oracle = dense_attention(&head, &p.element_mask()).unwrap();
        assert!(rel_l2_error(&out, &oracle) < 1e-5);
        assert_eq!(m.kept_fraction, 124.0 / 256.0);
        assert_eq!(m.flops_sparse, pair_flops(p.kept_pairs(), 8));
    }

    #[test]
    fn temporal_band_matches_masked_oracle() {
        let s = shape(3, 4, 4);
        let head = random_head(s.n(), 4, 3);
        let p = PatternMask::temporal(s, 0.25).unwrap();
        let (out, m) = run_band_attention(&head, &p, 16).unwrap();
        let oracle = dense_attention(&head, &p.element_mask()).unwrap();
        assert!(rel_l2_error(&out, &oracle) < 1e-5);
        let ratio = m.flops_sparse as f64 / m.flops_dense as f64;
        assert!((ratio - m.kept_fraction).abs() < 1e-12);
        assert!(m.flops_sparse <= m.flops_sparse_block && m.flops_sparse_block <= m.flops_dense);
    }

    #[test]
    fn streaming_softmax_matches_two_pass() {
        // Large score spread forces many running-max rescales.
        let s = shape(4, 8, 8);
        let mut rng = Rng::new(11);
        let mut m = |sc: f64| Matrix::from_fn(s.n(), 8, |_, _| (sc * rng.normal()) as f32);
        let head = AttentionHead::new(m(6.0), m(6.0), m(1.0)).unwrap();
        for p in [PatternMask::spatial(s, 0.3).unwrap(), PatternMask::temporal(s, 0.1).unwrap()] {
            let (out, _) = run_band_attention(&head, &p, 16).unwrap();
            let oracle = dense_attention(&head, &p.element_mask()).unwrap();
            for i in 0..s.n() {
                for c in 0..8 {
                    assert!((out.get(i, c) - oracle.get(i, c)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn textural_stride_one_is_dense() {
        let s = shape(2, 4, 4);
        let head = random_head(s.n(), 4, 4);
        let cb = checkerboard_indices(s, 1).unwrap();
        let (out, m) = run_textural_attention(&head, &cb).unwrap();
        let oracle = dense_attention(&head, &AdditiveMask::init(s.n())).unwrap();
        assert!(rel_l2_error(&out, &oracle) < 1e-6);
        assert_eq!(m.flops_sparse, m.flops_dense);
    }

    #[test]
    fn textural_matches_gathered_oracle() {
        let s = shape(2, 4, 4);
        let head = random_head(s.n(), 4, 5);
        let cb = checkerboard_indices(s, 2).unwrap();
        let (out, _) = run_textural_attention(&head, &cb).unwrap();
        let (k, v) = gather_checkerboard(&head, &cb).unwrap();
        let oracle = attention_against(head.q(), &k, &v).unwrap();
        assert!(rel_l2_error(&out, &oracle) < 1e-6);
        let masked = dense_attention(&head, &PatternMask::textural(s, 2).unwrap().element_mask()).unwrap();
        assert!(rel_l2_error(&out, &masked) < 1e-6);
    }

    #[test]
    fn textural_halves_flops_on_30x40() {
        let m = textural_metrics(30 * 40 * 2, 600 * 2, 16);
        assert_eq!(m.flops_sparse as f64 / m.flops_dense as f64, 0.5);
        assert_eq!(score_flops(2400 * 1200, 16) * 2, score_flops(2400 * 2400, 16));
    }

    #[test]
    fn tau_three_speedup() {
        let s = shape(1, 30, 40);
        let cb = checkerboard_indices(s, 3).unwrap();
        let sp = estimate_speedup(&textural_metrics(s.n(), cb.len(), 8)).unwrap();
        assert_eq!(sp.flops, 3.0);
        assert_eq!(sp.flops_exact, 3.0);
    }

    #[test]
    fn speedup_of_dense_metrics_is_one() {
        let sp = estimate_speedup(&RunMetrics::dense(100, 8)).unwrap();
        assert_eq!(sp.flops, 1.0);
        assert_eq!(sp.wall, None);
        assert!(estimate_speedup(&RunMetrics::default()).is_err());
    }

    #[test]
    fn seven_sixteenths_bounds_band_speedup() {
        let metrics = RunMetrics {
            flops_dense: 16_000,
            flops_sparse: 7_000,
            flops_sparse_block: 7_000,
            ..RunMetrics::default()
        };
        let sp = estimate_speedup(&metrics).unwrap();
        assert!((sp.flops - 16.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn dense_prefix_schedule() {
        let s = shape(1, 1, 1);
        let plan = SparsePlan::new(s, vec![], 0.1).unwrap();
        assert_eq!(plan.dense_steps(50), 5);
        assert!(plan.is_dense_step(4, 50));
        assert!(!plan.is_dense_step(5, 50));
        let all = SparsePlan::new(s, vec![], 1.0).unwrap();
        assert!((0..50).all(|i| all.is_dense_step(i, 50)));
        assert!(SparsePlan::new(s, vec![], 1.5).is_err());
    }

    #[test]
    fn prefix_steps_equal_the_oracle_bitwise() {
        let s = shape(2, 4, 4);
        let heads: Vec<_> = (0..2).map(|i| random_head(s.n(), 4, 20 + i)).collect();
        let plan = SparsePlan::new(
            s,
            vec![HeadAssignment::band(HeadClass::Spatial, 0.5), HeadAssignment::textural(2)],
            0.1,
        )
        .unwrap();
        let res = run_plan(&heads, &plan, 0, 50).unwrap();
        assert!(res.dense_step);
        for (h, out) in heads.iter().zip(&res.outputs) {
            assert_eq!(out, &dense_attention(h, &AdditiveMask::init(s.n())).unwrap());
        }
        assert_eq!(estimate_speedup(&res.total).unwrap().flops, 1.0);

        let sparse = run_plan(&heads, &plan, 5, 50).unwrap();
        assert!(!sparse.dense_step);
        assert!(sparse.total.flops_sparse < sparse.total.flops_dense);
    }

    #[test]
    fn merge_is_order_independent() {
        let a = RunMetrics { flops_dense: 10, flops_sparse: 4, flops_sparse_block: 6, rel_l2_error: 0.1, wall_ns_dense: 5, ..Default::default() };
        let b = RunMetrics { flops_dense: 30, flops_sparse: 20, flops_sparse_block: 25, rel_l2_error: 0.3, wall_ns_sparse: 7, ..Default::default() };
        let c = RunMetrics { flops_dense: 1, flops_sparse: 1, flops_sparse_block: 1, ..Default::default() };
        assert_eq!(a.merge(&b).merge(&c), c.merge(&b).merge(&a));
        assert_eq!(a.merge(&b).kept_fraction, 24.0 / 40.0);
    }

    #[test]
    fn textural_pattern_rejected_by_band_runner() {
        let s = shape(1, 2, 2);
        let head = random_head(4, 2, 1);
        assert!(run_band_attention(&head, &PatternMask::textural(s, 2).unwrap(), 16).is_err());
    }
}
