//! CSV and JSON report schemas.
//!
//! Column order is part of the contract and pinned by golden files; bump
//! [`SCHEMA_VERSION`] on any change.

use serde::{Deserialize, Serialize};
use stsparse_core::arm::HeadDecision;
use stsparse_core::executor::{estimate_speedup, RunMetrics, SOFTMAX_FLOPS_PER_PAIR};
use stsparse_core::{LatentShape, PatternKind};

pub const SCHEMA_VERSION: u32 = 1;

pub const CLASSIFY_COLUMNS: [&str; 9] = [
    "head",
    "r_temporal",
    "r_spatial",
    "alpha",
    "class",
    "bandwidth",
    "tau",
    "overhead_flops",
    "overhead_ratio",
];

pub const RUN_COLUMNS: [&str; 13] = [
    "step",
    "head",
    "class",
    "dense_step",
    "bandwidth",
    "tau",
    "kept_fraction",
    "flops_dense",
    "flops_sparse",
    "flops_sparse_block",
    "rel_l2_error",
    "wall_ns_dense",
    "wall_ns_sparse",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRow {
    pub head: usize,
    pub r_temporal: f64,
    pub r_spatial: f64,
    pub alpha: f64,
    pub class: String,
    pub bandwidth: Option<f64>,
    pub tau: Option<usize>,
    pub overhead_flops: u64,
    pub overhead_ratio: f64,
}

impl ClassifyRow {
    pub fn new(head: usize, d: &HeadDecision) -> Self {
        let r = &d.report;
        ClassifyRow {
            head,
            r_temporal: r.r_temporal,
            r_spatial: r.r_spatial,
            alpha: r.alpha,
            class: r.head_class.name().to_string(),
            bandwidth: d.bandwidth,
            tau: d.tau,
            overhead_flops: r.overhead_flops,
            overhead_ratio: r.overhead_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: usize,
    pub head: usize,
    pub class: String,
    pub dense_step: bool,
    pub bandwidth: Option<f64>,
    pub tau: Option<usize>,
    pub kept_fraction: f64,
    pub flops_dense: u64,
    pub flops_sparse: u64,
    pub flops_sparse_block: u64,
    pub rel_l2_error: f64,
    pub wall_ns_dense: u64,
    pub wall_ns_sparse: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub temporal: usize,
    pub spatial: usize,
    pub textural: usize,
}

impl ClassCounts {
    pub fn add(&mut self, kind: PatternKind) {
        match kind {
            PatternKind::Temporal => self.temporal += 1,
            PatternKind::Spatial => self.spatial += 1,
            PatternKind::Textural => self.textural += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub pairs_dense: u64,
    pub pairs_kept: u64,
    pub pairs_computed: u64,
    pub flops_dense: u64,
    pub flops_sparse: u64,
    pub flops_sparse_block: u64,
    pub kept_fraction: f64,
    pub wall_ns_dense: u64,
    pub wall_ns_sparse: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupSummary {
    /// Dense over block-granular FLOPs.
    pub flops: f64,
    /// Dense over element-exact FLOPs.
    pub flops_exact: f64,
    /// Dense over kept score-matmul FLOPs (`2·pairs·d`).
    pub score_stage: f64,
    pub wall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub shape: String,
    pub d: usize,
    pub num_heads: usize,
    pub block_size: usize,
    pub total_steps: usize,
    pub dense_steps: usize,
    pub steps: Vec<usize>,
    pub class_counts: ClassCounts,
    pub totals: Totals,
    pub speedup: SpeedupSummary,
    pub max_rel_l2_error: f64,
}

impl RunSummary {
    /// Summary over the merged metrics of every head and step.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        shape: LatentShape,
        d: usize,
        num_heads: usize,
        block_size: usize,
        total_steps: usize,
        dense_steps: usize,
        steps: Vec<usize>,
        class_counts: ClassCounts,
        total: &RunMetrics,
    ) -> Self {
        let per_pair = 4 * d as u64 + SOFTMAX_FLOPS_PER_PAIR;
        let pairs = |f: u64| f / per_pair;
        let ratio = |a: u64, b: u64| if b == 0 { f64::INFINITY } else { a as f64 / b as f64 };
        let speedup = estimate_speedup(total).ok();
        let totals = Totals {
            pairs_dense: pairs(total.flops_dense),
            pairs_kept: pairs(total.flops_sparse),
            pairs_computed: pairs(total.flops_sparse_block),
            flops_dense: total.flops_dense,
            flops_sparse: total.flops_sparse,
            flops_sparse_block: total.flops_sparse_block,
            kept_fraction: total.kept_fraction,
            wall_ns_dense: total.wall_ns_dense,
            wall_ns_sparse: total.wall_ns_sparse,
        };
        RunSummary {
            schema_version: SCHEMA_VERSION,
            shape: shape.to_string(),
            d,
            num_heads,
            block_size,
            total_steps,
            dense_steps,
            steps,
            class_counts,
            speedup: SpeedupSummary {
                flops: speedup.map_or(f64::NAN, |s| s.flops),
                flops_exact: speedup.map_or(f64::NAN, |s| s.flops_exact),
                score_stage: ratio(totals.pairs_dense, totals.pairs_kept),
                wall: speedup.and_then(|s| s.wall),
            },
            totals,
            max_rel_l2_error: total.rel_l2_error,
        }
    }
}

/// CSV with the given header, even when `rows` is empty.
pub fn to_csv<T: Serialize>(columns: &[&str], rows: &[T]) -> csv::Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(columns)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

pub fn to_json<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}
