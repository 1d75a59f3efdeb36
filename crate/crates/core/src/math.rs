//! Dense linear algebra and the exact masked-attention oracle.
//!
//! Everything is stored as `f32` and accumulated in `f64`. The oracle here is
//! deliberately plain (one query row at a time, two-pass softmax) so the
//! tiled executors can be checked against it.

use alloc::vec;
use alloc::vec::Vec;

use crate::patterns::PatternMask;
use crate::{Error, Result};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch("matrix data length != rows * cols"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// New matrix made of the given rows, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `f64` dot product of two `f32` rows.
#[inline]
pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Relative L2 distance `‖a − reference‖ / ‖reference‖`.
///
/// Falls back to the absolute distance when the reference is all zeros.
pub fn rel_l2_error(a: &Matrix, reference: &Matrix) -> f64 {
    assert_eq!(a.rows, reference.rows, "row count mismatch");
    assert_eq!(a.cols, reference.cols, "column count mismatch");
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for (&x, &r) in a.data.iter().zip(&reference.data) {
        let e = f64::from(x) - f64::from(r);
        diff += e * e;
        norm += f64::from(r) * f64::from(r);
    }
    if norm == 0.0 {
        libm::sqrt(diff)
    } else {
        libm::sqrt(diff / norm)
    }
}

/// Queries, keys and values of one attention head, each `n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    q: Matrix,
    k: Matrix,
    v: Matrix,
}

impl AttentionHead {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        if q.rows != k.rows || q.rows != v.rows {
            return Err(Error::ShapeMismatch("q, k and v must have the same row count"));
        }
        if q.cols != k.cols || q.cols != v.cols {
            return Err(Error::ShapeMismatch("q, k and v must have the same head dimension"));
        }
        if q.cols == 0 {
            return Err(Error::ShapeMismatch("head dimension must be positive"));
        }
        if q.rows == 0 {
            return Err(Error::ShapeMismatch("head must contain at least one token"));
        }
        if !(q.is_finite() && k.is_finite() && v.is_finite()) {
            return Err(Error::NonFinite("attention head"));
        }
        Ok(Self { q, k, v })
    }

    #[inline]
    pub fn q(&self) -> &Matrix {
        &self.q
    }

    #[inline]
    pub fn k(&self) -> &Matrix {
        &self.k
    }

    #[inline]
    pub fn v(&self) -> &Matrix {
        &self.v
    }

    /// Sequence length.
    #[inline]
    pub fn n(&self) -> usize {
        self.q.rows
    }

    /// Head dimension.
    #[inline]
    pub fn d(&self) -> usize {
        self.q.cols
    }

    /// Sub-head with only the listed keys and values; all queries stay.
    pub fn gather_keys(&self, indices: &[usize]) -> Result<(Matrix, Matrix)> {
        if indices.is_empty() {
            return Err(Error::EmptyAttentionRow { row: 0 });
        }
        if indices.iter().any(|&i| i >= self.n()) {
            return Err(Error::ShapeMismatch("gather index out of range"));
        }
        Ok((self.k.gather_rows(indices), self.v.gather_rows(indices)))
    }
}

/// Additive attention mask over `{0, −∞}`.
///
/// `Init` is the all-zero mask; `Pattern` is generated on demand from a
/// sparse pattern, so it never materializes the `n × n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum AdditiveMask {
    Init { rows: usize, cols: usize },
    Dense { rows: usize, cols: usize, entries: Vec<f32> },
    Pattern(PatternMask),
}

impl AdditiveMask {
    pub fn init(n: usize) -> Self {
        AdditiveMask::Init { rows: n, cols: n }
    }

    /// Converts a boolean keep map (row-major, `true` = keep).
    pub fn from_keep(rows: usize, cols: usize, keep: &[bool]) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::ShapeMismatch("keep map length != rows * cols"));
        }
        let entries = keep
            .iter()
            .map(|&k| if k { 0.0 } else { f32::NEG_INFINITY })
            .collect();
        Ok(AdditiveMask::Dense { rows, cols, entries })
    }

    pub fn from_fn(rows: usize, cols: usize, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(if keep(i, j) { 0.0 } else { f32::NEG_INFINITY });
            }
        }
        AdditiveMask::Dense { rows, cols, entries }
    }

    pub fn rows(&self) -> usize {
        match self {
            AdditiveMask::Init { rows, .. } | AdditiveMask::Dense { rows, .. } => *rows,
            AdditiveMask::Pattern(p) => p.shape().n(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            AdditiveMask::Init { cols, .. } | AdditiveMask::Dense { cols, .. } => *cols,
            AdditiveMask::Pattern(p) => p.shape().n(),
        }
    }

    #[inline]
    pub fn keeps(&self, q: usize, k: usize) -> bool {
        match self {
            AdditiveMask::Init { .. } => true,
            AdditiveMask::Dense { cols, entries, .. } => entries[q * cols + k] == 0.0,
            AdditiveMask::Pattern(p) => p.contains(q, k),
        }
    }

    #[inline]
    pub fn value(&self, q: usize, k: usize) -> f32 {
        if self.keeps(q, k) {
            0.0
        } else {
            f32::NEG_INFINITY
        }
    }

    pub fn kept_in_row(&self, q: usize) -> usize {
        (0..self.cols()).filter(|&k| self.keeps(q, k)).count()
    }

    /// Dense copy of the keep map, row-major.
    pub fn to_keep_map(&self) -> Vec<bool> {
        let (rows, cols) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(rows * cols);
        for q in 0..rows {
            for k in 0..cols {
                out.push(self.keeps(q, k));
            }
        }
        out
    }
}

/// Numerically stable softmax. `−∞` entries map to exactly zero.
pub fn softmax_row(scores: &[f64]) -> Result<Vec<f64>> {
    let mut out = scores.to_vec();
    softmax_in_place(&mut out, 0)?;
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], row_index: usize) -> Result<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::EmptyAttentionRow { row: row_index });
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = if *x == f64::NEG_INFINITY {
            0.0
        } else {
            libm::exp(*x - max)
        };
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// `q_i · k_j / √d` for every pair, row-major `q.rows() × k.rows()`.
pub fn score_matrix(q: &Matrix, k: &Matrix) -> Vec<f64> {
    assert_eq!(q.cols, k.cols, "head dimension mismatch");
    let scale = 1.0 / libm::sqrt(q.cols as f64);
    let mut out = Vec::with_capacity(q.rows * k.rows);
    for i in 0..q.rows {
        let qi = q.row(i);
        for j in 0..k.rows {
            out.push(dot64(qi, k.row(j)) * scale);
        }
    }
    out
}

/// Full `n × n` scaled score matrix of a head.
pub fn attention_scores(head: &AttentionHead) -> Vec<f64> {
    score_matrix(&head.q, &head.k)
}

/// One output row of masked dense attention, written into `out`.
///
/// `scratch` must hold `n` values; it is overwritten.
pub fn dense_attention_row(
    head: &AttentionHead,
    mask: &AdditiveMask,
    row: usize,
    scratch: &mut [f64],
    out: &mut [f32],
) -> Result<()> {
    let n = head.n();
    let scale = 1.0 / libm::sqrt(head.d() as f64);
    let qi = head.q.row(row);
    for (j, s) in scratch[..n].iter_mut().enumerate() {
        *s = if mask.keeps(row, j) {
            dot64(qi, head.k.row(j)) * scale
        } else {
            f64::NEG_INFINITY
        };
    }
    softmax_in_place(&mut scratch[..n], row)?;
    let d = head.d();
    let mut acc = vec![0.0f64; d];
    for (j, &p) in scratch[..n].iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (a, &x) in acc.iter_mut().zip(head.v.row(j)) {
            *a += p * f64::from(x);
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = a as f32;
    }
    Ok(())
}

fn check_mask_dims(head: &AttentionHead, mask: &AdditiveMask) -> Result<()> {
    if mask.rows() != head.n() || mask.cols() != head.n() {
        return Err(Error::ShapeMismatch("mask must be n x n"));
    }
    Ok(())
}

/// `softmax(QKᵀ/√d + M) V`, one query row at a time.
pub fn dense_attention(head: &AttentionHead, mask: &AdditiveMask) -> Result<Matrix> {
    check_mask_dims(head, mask)?;
    let n = head.n();
    let mut out = Matrix::zeros(n, head.d());
    let mut scratch = vec![0.0f64; n];
    for i in 0..n {
        dense_attention_row(head, mask, i, &mut scratch, out.row_mut(i))?;
    }
    Ok(out)
}

/// Unmasked attention of `q` against an arbitrary key/value set.
pub fn attention_against(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if k.rows != v.rows || q.cols != k.cols || k.cols != v.cols {
        return Err(Error::ShapeMismatch("q/k/v dimension mismatch"));
    }
    if k.rows == 0 {
        return Err(Error::EmptyAttentionRow { row: 0 });
    }
    let scores = score_matrix(q, k);
    let mut out = Matrix::zeros(q.rows, v.cols);
    let mut row = vec![0.0f64; k.rows];
    let mut acc = vec![0.0f64; v.cols];
    for i in 0..q.rows {
        row.copy_from_slice(&scores[i * k.rows..(i + 1) * k.rows]);
        softmax_in_place(&mut row, i)?;
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, &p) in row.iter().enumerate() {
            for (a, &x) in acc.iter_mut().zip(v.row(j)) {
                *a += p * f64::from(x);
            }
        }
        for (o, &a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = a as f32;
        }
    }
    Ok(out)
}
