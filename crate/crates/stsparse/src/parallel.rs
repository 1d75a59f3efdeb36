//! Multi-threaded execution over query blocks.

use std::time::Instant;

use rayon::prelude::*;
use stsparse_core::executor::{
    gather_checkerboard, HeadAssignment, RunMetrics, SparsePlan, TileStats, TiledAttention,
};
use stsparse_core::math::dense_attention_row;
use stsparse_core::patterns::{build_block_mask, checkerboard_indices};
use stsparse_core::{AdditiveMask, AttentionHead, Error, LatentShape, Matrix, PatternKind, Result};

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "STSPARSE_THREADS";

/// Worker count from `STSPARSE_THREADS`, else the available parallelism.
pub fn default_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool")
}

/// Runs every query block of `kernel` on the current rayon pool.
pub fn run_kernel(kernel: &TiledAttention<'_>, rows: usize) -> Result<(Matrix, TileStats)> {
    let d = kernel.d();
    let mut out = Matrix::zeros(rows, d);
    let stats = out
        .as_mut_slice()
        .par_chunks_mut(kernel.block_size() * d)
        .enumerate()
        .map(|(qb, chunk)| kernel.compute_block(qb, chunk))
        .try_reduce(TileStats::default, |a, b| Ok(a + b))?;
    Ok((out, stats))
}

/// Masked dense attention computed row-parallel with the reference row
/// routine, so results are bitwise equal to the sequential oracle.
pub fn dense_oracle(head: &AttentionHead, mask: &AdditiveMask) -> Result<Matrix> {
    let (n, d) = (head.n(), head.d());
    if mask.rows() != n || mask.cols() != n {
        return Err(Error::ShapeMismatch("mask must be n x n"));
    }
    let mut out = Matrix::zeros(n, d);
    out.as_mut_slice()
        .par_chunks_mut(d)
        .enumerate()
        .try_for_each_init(
            || vec![0.0f64; n],
            |scratch, (i, row)| dense_attention_row(head, mask, i, scratch, row),
        )?;
    Ok(out)
}

/// Full attention through the tiled kernel with every tile computed.
pub fn dense_tiled(head: &AttentionHead, block_size: usize) -> Result<(Matrix, TileStats)> {
    let kernel = TiledAttention::dense(head.q(), head.k(), head.v(), block_size)?;
    run_kernel(&kernel, head.n())
}

/// Sparse execution of one head, parallel over query blocks.
pub fn sparse_head(
    head: &AttentionHead,
    shape: LatentShape,
    assignment: &HeadAssignment,
    block_size: usize,
) -> Result<(Matrix, RunMetrics)> {
    let pattern = assignment.pattern(shape)?;
    let (n, d) = (head.n(), head.d());
    let (out, stats, kept_fraction) = match pattern.kind() {
        PatternKind::Textural => {
            let tau = pattern.stride().expect("textural pattern has a stride");
            let cb = checkerboard_indices(shape, tau)?;
            let (k, v) = gather_checkerboard(head, &cb)?;
            let kernel = TiledAttention::dense(head.q(), &k, &v, block_size)?;
            let (out, stats) = run_kernel(&kernel, n)?;
            (out, stats, k.rows() as f64 / n as f64)
        }
        _ => {
            let blocks = build_block_mask(&pattern, block_size)?;
            let kernel = TiledAttention::band(head, &blocks)?;
            let (out, stats) = run_kernel(&kernel, n)?;
            (out, stats, pattern.kept_fraction())
        }
    };
    Ok((out, metrics_from_stats(stats, n, d, kept_fraction)))
}

fn metrics_from_stats(stats: TileStats, n: usize, d: usize, kept_fraction: f64) -> RunMetrics {
    use stsparse_core::executor::pair_flops;
    RunMetrics {
        flops_dense: pair_flops((n * n) as u64, d),
        flops_sparse: pair_flops(stats.kept_pairs, d),
        flops_sparse_block: pair_flops(stats.computed_pairs, d),
        kept_fraction,
        ..RunMetrics::default()
    }
}

/// What to measure besides the outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Measure {
    /// Distance of each sparse output to full dense attention.
    pub error: bool,
    /// Time the dense tiled kernel alongside the sparse one.
    pub timing: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub step: usize,
    pub dense_step: bool,
    pub outputs: Vec<Matrix>,
    pub per_head: Vec<RunMetrics>,
}

/// One step of the plan for every head, on the current rayon pool.
///
/// Dense-prefix steps return the oracle output; their sparse and dense
/// timings are the same measurement.
pub fn run_step(
    heads: &[AttentionHead],
    plan: &SparsePlan,
    step: usize,
    total_steps: usize,
    measure: Measure,
) -> Result<StepOutput> {
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
        let (n, d) = (head.n(), head.d());
        if dense_step {
            let t0 = Instant::now();
            let out = dense_oracle(head, &AdditiveMask::init(n))?;
            let ns = elapsed_ns(t0);
            let mut m = metrics_from_stats(
                TileStats {
                    kept_pairs: (n * n) as u64,
                    computed_pairs: (n * n) as u64,
                },
                n,
                d,
                1.0,
            );
            if measure.timing {
                m.wall_ns_dense = ns;
                m.wall_ns_sparse = ns;
            }
            outputs.push(out);
            per_head.push(m);
            continue;
        }
        let t0 = Instant::now();
        let (out, mut m) = sparse_head(head, plan.shape, assignment, plan.block_size)?;
        let sparse_ns = elapsed_ns(t0);
        if measure.timing {
            let t0 = Instant::now();
            dense_tiled(head, plan.block_size)?;
            m.wall_ns_dense = elapsed_ns(t0);
            m.wall_ns_sparse = sparse_ns;
        }
        if measure.error {
            let reference = dense_oracle(head, &AdditiveMask::init(n))?;
            m.measure_error(&out, &reference);
        }
        outputs.push(out);
        per_head.push(m);
    }
    Ok(StepOutput {
        step,
        dense_step,
        outputs,
        per_head,
    })
}

pub(crate) fn elapsed_ns(t0: Instant) -> u64 {
    t0.elapsed().as_nanos().max(1).min(u64::MAX as u128) as u64
}
