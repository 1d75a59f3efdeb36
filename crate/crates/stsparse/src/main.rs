use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use stsparse::bench::{run_benchmark, BenchConfig};
use stsparse::config::{parse_shape, usage, GenKind, RunConfig, UsageError};
use stsparse::dump::{encode_outputs, read_dump, write_atomic, write_dump, HeadDump};
use stsparse::parallel::{default_threads, pool, run_step, Measure};
use stsparse::pgm::{heatmap, mask_image};
use stsparse::report::{to_csv, to_json, ClassCounts, ClassifyRow, RunRow, RunSummary, CLASSIFY_COLUMNS, RUN_COLUMNS};
use stsparse_core::arm::{decide_head, HeadDecision};
use stsparse_core::executor::{HeadAssignment, RunMetrics, SparsePlan};
use stsparse_core::workload::{generate_planted, PlantedSpec};
use stsparse_core::{LatentShape, PatternKind, PatternMask};

#[derive(Debug, Parser)]
#[command(name = "stsparse", version, about = "Spatio-temporal sparse attention for video latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write planted heads to a dump file.
    Gen(GenCmd),
    /// Classify every head of a dump; one CSV row per head.
    Classify(ClassifyCmd),
    /// Classify, then execute sparse attention and report metrics.
    Run(RunCmd),
    /// Render one head's softmax map as a PGM image.
    Heatmap(HeatmapCmd),
    /// Render a pattern mask as a PGM image.
    Mask(MaskCmd),
    /// Time sparse against dense attention on planted heads.
    Bench(BenchCmd),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenFlags {
    /// Latent shape TxHxW.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long = "heads")]
    num_heads: Option<usize>,
    /// temporal, spatial, textural or mixed.
    #[arg(long)]
    kind: Option<GenKind>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    locality_width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ArmFlags {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    tau: Option<usize>,
    /// Global sampling interval (default t).
    #[arg(long)]
    omega: Option<usize>,
    /// Pick each band head's bandwidth from the candidates.
    #[arg(long)]
    adaptive: bool,
    /// Comma-separated bandwidth candidates (implies --adaptive).
    #[arg(long, value_delimiter = ',')]
    candidates: Option<Vec<f64>>,
    #[arg(long)]
    recall_target: Option<f64>,
}

#[derive(Debug, Args)]
struct GenCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    gen: GenFlags,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClassifyCmd {
    #[command(flatten)]
    common: Common,
    /// Head dump to read.
    dump: PathBuf,
    #[command(flatten)]
    arm: ArmFlags,
    /// CSV destination (default stdout).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunCmd {
    #[command(flatten)]
    common: Common,
    dump: PathBuf,
    #[command(flatten)]
    arm: ArmFlags,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    dense_prefix: Option<f64>,
    #[arg(long)]
    total_steps: Option<usize>,
    /// Steps to execute (repeatable; default the first sparse step).
    #[arg(long = "step")]
    steps: Vec<usize>,
    /// Treat every step as dense.
    #[arg(long)]
    dense: bool,
    /// Skip the comparison against full dense attention.
    #[arg(long)]
    no_error: bool,
    /// Also write the last step's outputs to `outputs.bin`.
    #[arg(long)]
    save_outputs: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HeatmapCmd {
    #[command(flatten)]
    common: Common,
    dump: PathBuf,
    #[arg(long)]
    head: usize,
    #[arg(long, short)]
    out: PathBuf,
    /// Draw the boundary of the mask the classifier picks for this head.
    #[arg(long)]
    overlay: bool,
    #[command(flatten)]
    arm: ArmFlags,
}

#[derive(Debug, Args)]
struct MaskCmd {
    #[arg(long)]
    shape: String,
    /// spatial, temporal or textural.
    #[arg(long)]
    kind: GenKind,
    #[arg(long, default_value_t = stsparse_core::arm::DEFAULT_BANDWIDTH)]
    bandwidth: f64,
    #[arg(long, default_value_t = stsparse_core::arm::DEFAULT_TAU)]
    tau: usize,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchCmd {
    #[arg(long, default_value = "12x30x45")]
    shape: String,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 32)]
    block_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multi-threaded worker count (default: STSPARSE_THREADS or all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl GenFlags {
    fn config(&self) -> RunConfig {
        RunConfig {
            shape: self.shape.clone(),
            d: self.d,
            num_heads: self.num_heads,
            kind: self.kind,
            noise: self.noise,
            locality_width: self.locality_width,
            seed: self.seed,
            ..RunConfig::default()
        }
    }
}

impl ArmFlags {
    fn config(&self) -> RunConfig {
        RunConfig {
            alpha: self.alpha,
            bandwidth: self.bandwidth,
            tau: self.tau,
            omega: self.omega,
            adaptive: self.adaptive.then_some(true),
            candidates: self.candidates.clone(),
            recall_target: self.recall_target,
            ..RunConfig::default()
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("run with --help for usage");
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => cmd_gen(c),
        Command::Classify(c) => cmd_classify(c),
        Command::Run(c) => cmd_run(c),
        Command::Heatmap(c) => cmd_heatmap(c),
        Command::Mask(c) => cmd_mask(c),
        Command::Bench(c) => cmd_bench(c),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_dump(path: &Path, cfg: &RunConfig) -> Result<HeadDump> {
    let dump = read_dump(path)?;
    if let Some(shape) = cfg.shape()? {
        if shape != dump.shape {
            bail!(usage(format!("configured shape {shape} does not match dump shape {}", dump.shape)));
        }
    }
    Ok(dump)
}

fn cmd_gen(c: GenCmd) -> Result<()> {
    let cfg = RunConfig::layered(c.gen.config(), c.common.config.as_deref())?;
    let shape = cfg.require_shape()?;
    let (d, num_heads, noise, seed) = (cfg.d()?, cfg.num_heads()?, cfg.noise()?, cfg.seed());
    let kind = cfg.kind.unwrap_or(GenKind::Mixed);
    let mut heads = Vec::with_capacity(num_heads);
    let mut classes = Vec::with_capacity(num_heads);
    for i in 0..num_heads {
        let k = kind.kind_of_head(i);
        let mut spec = PlantedSpec::new(k, shape, d, seed.wrapping_add(i as u64)).with_noise(noise);
        if let Some(w) = cfg.locality_width {
            spec = spec.with_locality(w);
        }
        heads.push(generate_planted(&spec).map_err(|e| usage(e.to_string()))?);
        classes.push(k);
    }
    write_dump(&heads, shape, &c.out)?;
    println!("{}", c.out.display());
    for (i, k) in classes.iter().enumerate() {
        println!("head {i}: {}", k.name());
    }
    Ok(())
}

fn decide_all(dump: &HeadDump, cfg: &RunConfig) -> Result<Vec<HeadDecision>> {
    let arm = cfg.arm(dump.shape)?;
    Ok(dump
        .heads
        .iter()
        .map(|h| decide_head(h, dump.shape, &arm))
        .collect::<stsparse_core::Result<_>>()?)
}

fn cmd_classify(c: ClassifyCmd) -> Result<()> {
    let cfg = RunConfig::layered(c.arm.config(), c.common.config.as_deref())?;
    let dump = load_dump(&c.dump, &cfg)?;
    let rows: Vec<ClassifyRow> = decide_all(&dump, &cfg)?
        .iter()
        .enumerate()
        .map(|(i, d)| ClassifyRow::new(i, d))
        .collect();
    let csv = to_csv(&CLASSIFY_COLUMNS, &rows)?;
    match &c.out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{}", String::from_utf8(csv)?),
    }
    Ok(())
}

fn cmd_run(c: RunCmd) -> Result<()> {
    let flags = RunConfig {
        block_size: c.block_size,
        dense_prefix: c.dense_prefix,
        total_steps: c.total_steps,
        out_dir: c.out_dir.clone(),
        ..c.arm.config()
    };
    let cfg = RunConfig::layered(flags, c.common.config.as_deref())?;
    let dump = load_dump(&c.dump, &cfg)?;
    let (shape, d) = (dump.shape, dump.d());
    let total_steps = cfg.total_steps()?;
    let dense_prefix = if c.dense { 1.0 } else { cfg.dense_prefix()? };
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let decisions = if c.dense { None } else { Some(decide_all(&dump, &cfg)?) };
    let assignments: Vec<HeadAssignment> = match &decisions {
        Some(ds) => ds.iter().map(HeadAssignment::from).collect(),
        None => vec![HeadAssignment::band(PatternKind::Spatial, 1.0); dump.heads.len()],
    };
    let mut plan = SparsePlan::new(shape, assignments.clone(), dense_prefix)?;
    plan.block_size = cfg.block_size()?;
    let steps = if c.steps.is_empty() {
        vec![plan.dense_steps(total_steps).min(total_steps - 1)]
    } else {
        c.steps.clone()
    };
    if let Some(&s) = steps.iter().find(|&&s| s >= total_steps) {
        bail!(usage(format!("step {s} is outside 0..{total_steps}")));
    }

    let measure = Measure {
        error: !c.no_error,
        timing: true,
    };
    let pool = pool(default_threads());
    let mut rows = Vec::new();
    let mut total = RunMetrics::default();
    let mut last_outputs = Vec::new();
    let mut counts = ClassCounts::default();
    for a in &assignments {
        if decisions.is_some() {
            counts.add(a.class);
        }
    }
    for &step in &steps {
        let out = pool.install(|| run_step(&dump.heads, &plan, step, total_steps, measure))?;
        for (i, m) in out.per_head.iter().enumerate() {
            let a = &assignments[i];
            let class = if decisions.is_none() { "dense" } else { a.class.name() };
            rows.push(RunRow {
                step,
                head: i,
                class: class.to_string(),
                dense_step: out.dense_step,
                bandwidth: if out.dense_step { None } else { a.bandwidth },
                tau: if out.dense_step { None } else { a.tau },
                kept_fraction: m.kept_fraction,
                flops_dense: m.flops_dense,
                flops_sparse: m.flops_sparse,
                flops_sparse_block: m.flops_sparse_block,
                rel_l2_error: m.rel_l2_error,
                wall_ns_dense: m.wall_ns_dense,
                wall_ns_sparse: m.wall_ns_sparse,
            });
            total = total.merge(m);
        }
        last_outputs = out.outputs;
    }

    let summary = RunSummary::new(
        shape,
        d,
        dump.heads.len(),
        plan.block_size,
        total_steps,
        plan.dense_steps(total_steps),
        steps,
        counts,
        &total,
    );
    let metrics_path = out_dir.join("metrics.csv");
    let summary_path = out_dir.join("summary.json");
    write_file(&metrics_path, &to_csv(&RUN_COLUMNS, &rows)?)?;
    write_file(&summary_path, &to_json(&summary)?)?;
    if c.save_outputs {
        write_file(&out_dir.join("outputs.bin"), &encode_outputs(&last_outputs)?)?;
    }
    println!("{}", metrics_path.display());
    println!("{}", summary_path.display());
    println!(
        "flops speedup {:.4} (exact {:.4}), max rel-L2 error {:.3e}",
        summary.speedup.flops, summary.speedup.flops_exact, summary.max_rel_l2_error
    );
    Ok(())
}

fn cmd_heatmap(c: HeatmapCmd) -> Result<()> {
    let cfg = RunConfig::layered(c.arm.config(), c.common.config.as_deref())?;
    let dump = load_dump(&c.dump, &cfg)?;
    let Some(head) = dump.heads.get(c.head) else {
        bail!(usage(format!(
            "head {} out of range (dump has {} heads)",
            c.head,
            dump.heads.len()
        )));
    };
    let overlay = if c.overlay {
        let decision = decide_head(head, dump.shape, &cfg.arm(dump.shape)?)?;
        println!(
            "class {} r_temporal {} r_spatial {}",
            decision.report.head_class.name(),
            decision.report.r_temporal,
            decision.report.r_spatial
        );
        Some(HeadAssignment::from(&decision).pattern(dump.shape)?)
    } else {
        None
    };
    let map = pool(default_threads()).install(|| heatmap(head, overlay.as_ref()))?;
    write_file(&c.out, &map.image.to_pgm())?;
    println!("{} {}x{}", c.out.display(), map.image.width, map.image.height);
    if let Some(m) = map.mask_mass {
        println!("mask_mass {m}");
    }
    Ok(())
}

fn cmd_mask(c: MaskCmd) -> Result<()> {
    let shape: LatentShape = parse_shape(&c.shape)?;
    let pattern = match c.kind {
        GenKind::Spatial => PatternMask::spatial(shape, c.bandwidth),
        GenKind::Temporal => PatternMask::temporal(shape, c.bandwidth),
        GenKind::Textural => PatternMask::textural(shape, c.tau),
        GenKind::Mixed => bail!(usage("mask needs spatial, temporal or textural")),
    }
    .map_err(|e| usage(e.to_string()))?;
    let img = pool(default_threads()).install(|| mask_image(&pattern));
    write_file(&c.out, &img.to_pgm())?;
    println!("{} {}x{} kept_fraction {}", c.out.display(), img.width, img.height, pattern.kept_fraction());
    Ok(())
}

fn cmd_bench(c: BenchCmd) -> Result<()> {
    let shape = parse_shape(&c.shape)?;
    if c.runs == 0 || c.d == 0 || !c.block_size.is_power_of_two() {
        bail!(usage("runs and d must be positive, block_size a power of two"));
    }
    let multi = c.threads.unwrap_or_else(default_threads).max(1);
    let mut threads = vec![1, multi];
    threads.dedup();
    let mut cfg = BenchConfig::new(shape, c.d, threads);
    cfg.runs = c.runs;
    cfg.block_size = c.block_size;
    cfg.seed = c.seed;
    let report = run_benchmark(&cfg)?;
    for h in &report.heads {
        println!("{:<9} kept {:.4} computed {:.4}", h.kind, h.kept_fraction, h.computed_fraction);
    }
    println!(
        "flops speedup {:.4} (exact {:.4}, predicted {:.4})",
        report.flops_speedup, report.flops_speedup_exact, report.predicted_speedup
    );
    for v in &report.variants {
        println!(
            "threads {:>3}: dense {:.3} s, sparse {:.3} s, wall speedup {:.3}",
            v.threads,
            v.dense_ns_median / 1e9,
            v.sparse_ns_median / 1e9,
            v.wall_speedup
        );
    }
    if let Some(p) = &c.out {
        write_file(p, &to_json(&report)?)?;
    }
    Ok(())
}
