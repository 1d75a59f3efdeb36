//! Sparse vs. dense wall-clock benchmark over planted heads.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use stsparse_core::arm::{DEFAULT_BANDWIDTH, DEFAULT_TAU};
use stsparse_core::executor::HeadAssignment;
use stsparse_core::workload::{generate_planted, PlantedSpec};
use stsparse_core::{AttentionHead, LatentShape, PatternKind, Result};

use crate::parallel::{dense_tiled, elapsed_ns, pool, sparse_head};
use crate::report::SCHEMA_VERSION;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub shape: LatentShape,
    pub d: usize,
    pub runs: usize,
    pub warmup: usize,
    pub bandwidth: f64,
    pub tau: usize,
    pub block_size: usize,
    pub noise: f64,
    pub seed: u64,
    /// One benchmark variant per entry.
    pub threads: Vec<usize>,
}

impl BenchConfig {
    pub fn new(shape: LatentShape, d: usize, threads: Vec<usize>) -> Self {
        BenchConfig {
            shape,
            d,
            runs: 5,
            warmup: 1,
            bandwidth: DEFAULT_BANDWIDTH,
            tau: DEFAULT_TAU,
            block_size: 32,
            noise: 0.1,
            seed: 0,
            threads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchHead {
    pub kind: String,
    pub kept_fraction: f64,
    /// Fraction of pairs inside computed tiles.
    pub computed_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchVariant {
    pub threads: usize,
    pub dense_ns: Vec<u64>,
    pub sparse_ns: Vec<u64>,
    pub dense_ns_median: f64,
    pub sparse_ns_median: f64,
    pub wall_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub shape: String,
    pub d: usize,
    pub block_size: usize,
    pub runs: usize,
    pub warmup: usize,
    pub heads: Vec<BenchHead>,
    pub mean_kept_fraction: f64,
    /// `1 / mean_kept_fraction`.
    pub predicted_speedup: f64,
    /// Dense over block-granular (computed) FLOPs.
    pub flops_speedup: f64,
    /// Dense over element-exact (kept) FLOPs.
    pub flops_speedup_exact: f64,
    pub variants: Vec<BenchVariant>,
}

pub fn median(xs: &[u64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_unstable();
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2] as f64,
        n => (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0,
    }
}

/// One spatial, one temporal and one textural head.
pub fn bench_heads(cfg: &BenchConfig) -> Result<Vec<(AttentionHead, HeadAssignment)>> {
    [PatternKind::Spatial, PatternKind::Temporal, PatternKind::Textural]
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let spec = PlantedSpec::new(kind, cfg.shape, cfg.d, cfg.seed.wrapping_add(i as u64)).with_noise(cfg.noise);
            let assignment = match kind {
                PatternKind::Textural => HeadAssignment::textural(cfg.tau),
                k => HeadAssignment::band(k, cfg.bandwidth),
            };
            Ok((generate_planted(&spec)?, assignment))
        })
        .collect()
}

pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    let heads = bench_heads(cfg)?;
    let mut bench_heads = Vec::new();
    let (mut dense, mut kept, mut computed) = (0u64, 0u64, 0u64);
    for (head, a) in &heads {
        let (_, m) = pool(cfg.threads.first().copied().unwrap_or(1))
            .install(|| sparse_head(head, cfg.shape, a, cfg.block_size))?;
        dense += m.flops_dense;
        kept += m.flops_sparse;
        computed += m.flops_sparse_block;
        bench_heads.push(BenchHead {
            kind: a.class.name().to_string(),
            kept_fraction: m.kept_fraction,
            computed_fraction: m.flops_sparse_block as f64 / m.flops_dense as f64,
        });
    }
    let mean_kept = bench_heads.iter().map(|h| h.kept_fraction).sum::<f64>() / bench_heads.len() as f64;

    let mut variants = Vec::new();
    for &threads in &cfg.threads {
        let pool = pool(threads);
        let (mut dense_ns, mut sparse_ns) = (Vec::new(), Vec::new());
        for run in 0..cfg.warmup + cfg.runs {
            let (dn, sn) = pool.install(|| -> Result<(u64, u64)> {
                let t0 = Instant::now();
                for (head, _) in &heads {
                    dense_tiled(head, cfg.block_size)?;
                }
                let dn = elapsed_ns(t0);
                let t0 = Instant::now();
                for (head, a) in &heads {
                    sparse_head(head, cfg.shape, a, cfg.block_size)?;
                }
                Ok((dn, elapsed_ns(t0)))
            })?;
            if run >= cfg.warmup {
                dense_ns.push(dn);
                sparse_ns.push(sn);
            }
        }
        let (dm, sm) = (median(&dense_ns), median(&sparse_ns));
        variants.push(BenchVariant {
            threads,
            dense_ns,
            sparse_ns,
            dense_ns_median: dm,
            sparse_ns_median: sm,
            wall_speedup: dm / sm,
        });
    }
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        shape: cfg.shape.to_string(),
        d: cfg.d,
        block_size: cfg.block_size,
        runs: cfg.runs,
        warmup: cfg.warmup,
        heads: bench_heads,
        mean_kept_fraction: mean_kept,
        predicted_speedup: 1.0 / mean_kept,
        flops_speedup: dense as f64 / computed as f64,
        flops_speedup_exact: dense as f64 / kept as f64,
        variants,
    })
}
