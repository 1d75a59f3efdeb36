//! 8-bit binary PGM (P5) rendering of score maps and masks.
//!
//! Maps larger than [`MAX_SIDE`] per axis are mean-pooled: query `i` lands
//! in pixel row `i·side/n`, likewise for keys.

use rayon::prelude::*;
use stsparse_core::math::{dot64, softmax_row};
use stsparse_core::{AttentionHead, PatternMask, Result};

pub const MAX_SIDE: usize = 2048;
/// Pixel value of mask-boundary overlay cells.
pub const BOUNDARY: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses the P5 layout written by [`Image::to_pgm`].
    pub fn from_pgm(bytes: &[u8]) -> Option<Image> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return None;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
        }
        pos += 1;
        if fields[0] != "P5" || fields[3] != "255" {
            return None;
        }
        let (width, height): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
        let pixels = bytes.get(pos..)?.to_vec();
        (pixels.len() == width * height).then_some(Image { width, height, pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

pub fn side(n: usize) -> usize {
    n.min(MAX_SIDE)
}

#[inline]
fn cell(i: usize, n: usize, side: usize) -> usize {
    i * side / n
}

/// First index belonging to cell `c`.
#[inline]
fn cell_start(c: usize, n: usize, side: usize) -> usize {
    (c * n).div_ceil(side)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub image: Image,
    /// Mean over queries of the softmax mass inside the overlay mask.
    pub mask_mass: Option<f64>,
}

/// Row-softmax map of `head`, scaled so the largest pooled value is 255,
/// with the boundary of `overlay` drawn in [`BOUNDARY`] gray.
pub fn heatmap(head: &AttentionHead, overlay: Option<&PatternMask>) -> Result<Heatmap> {
    let n = head.n();
    let s = side(n);
    let scale = 1.0 / (head.d() as f64).sqrt();
    let rows: Vec<(Vec<f64>, f64)> = (0..s)
        .into_par_iter()
        .map(|r| -> Result<(Vec<f64>, f64)> {
            let (i0, i1) = (cell_start(r, n, s), cell_start(r + 1, n, s));
            let mut pooled = vec![0.0f64; s];
            let mut mass = 0.0;
            let mut scores = vec![0.0f64; n];
            for i in i0..i1 {
                let qi = head.q().row(i);
                for (j, x) in scores.iter_mut().enumerate() {
                    *x = dot64(qi, head.k().row(j)) * scale;
                }
                let p = softmax_row(&scores)?;
                for (j, &pj) in p.iter().enumerate() {
                    pooled[cell(j, n, s)] += pj;
                }
                if let Some(m) = overlay {
                    mass += p.iter().enumerate().filter(|&(j, _)| m.contains(i, j)).map(|(_, &x)| x).sum::<f64>();
                }
            }
            let rows_in_cell = (i1 - i0) as f64;
            for (c, x) in pooled.iter_mut().enumerate() {
                let cols = (cell_start(c + 1, n, s) - cell_start(c, n, s)) as f64;
                *x /= rows_in_cell * cols;
            }
            Ok((pooled, mass))
        })
        .collect::<Result<_>>()?;
    let max = rows.iter().flat_map(|(r, _)| r.iter().copied()).fold(0.0, f64::max);
    let mut pixels: Vec<u8> = rows
        .iter()
        .flat_map(|(r, _)| r.iter().map(|&x| if max > 0.0 { (x / max * 255.0).round() as u8 } else { 0 }))
        .collect();
    let mask_mass = overlay.map(|_| rows.iter().map(|(_, m)| m).sum::<f64>() / n as f64);
    if let Some(m) = overlay {
        let keep = |r: usize, c: usize| m.contains(cell_start(r, n, s), cell_start(c, n, s));
        for r in 0..s {
            for c in 0..s {
                let k = keep(r, c);
                let edge = (c + 1 < s && keep(r, c + 1) != k) || (r + 1 < s && keep(r + 1, c) != k);
                if edge {
                    pixels[r * s + c] = BOUNDARY;
                }
            }
        }
    }
    Ok(Heatmap {
        image: Image {
            width: s,
            height: s,
            pixels,
        },
        mask_mass,
    })
}

/// Kept fraction of each pooled cell of `pattern`, scaled to 0..=255.
pub fn mask_image(pattern: &PatternMask) -> Image {
    let n = pattern.shape().n();
    let s = side(n);
    let pixels = (0..s)
        .into_par_iter()
        .flat_map_iter(|r| {
            let (i0, i1) = (cell_start(r, n, s), cell_start(r + 1, n, s));
            (0..s).map(move |c| {
                let (j0, j1) = (cell_start(c, n, s), cell_start(c + 1, n, s));
                let kept = (i0..i1).map(|i| (j0..j1).filter(|&j| pattern.contains(i, j)).count()).sum::<usize>();
                let total = (i1 - i0) * (j1 - j0);
                (kept as f64 / total as f64 * 255.0).round() as u8
            })
        })
        .collect();
    Image {
        width: s,
        height: s,
        pixels,
    }
}
