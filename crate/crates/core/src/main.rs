use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fuzzyalign::gradsuite::{run_suite, SUITE_TOLERANCE};
use fuzzyalign::io::{
    read_world, write_report, write_text, write_trace, write_world, Checkpoint, EmbeddingFile,
    RunConfig,
};
use fuzzyalign::metrics::{evaluate, RetrievalTask, DEFAULT_CUTOFFS};
use fuzzyalign::synth::{
    gate_records, generate, k_sweep, membership_records, run_experiment, Variant, K_SWEEP,
};

#[derive(Parser)]
#[command(
    name = "fuzzyalign",
    version,
    about = "Fuzzy cross-modal alignment on synthetic aerial retrieval worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write it as embedding files.
    Generate(GenerateArgs),
    /// Train one loss variant on a generated world.
    Train(TrainArgs),
    /// Score a query embedding file against a gallery file.
    Eval(EvalArgs),
    /// Dump gates, memberships and a gate-sharpness sweep for a checkpoint.
    Analyze(AnalyzeArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// World directory written by `generate`.
    #[arg(long, value_name = "DIR")]
    world: PathBuf,
    /// baseline_sdm, cda, cda_fta or fta_unweighted.
    #[arg(long, value_name = "NAME")]
    variant: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    query: PathBuf,
    #[arg(long, value_name = "FILE")]
    gallery: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    world: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_name = "U64", default_value_t = 0)]
    seed: u64,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display())),
        None => Ok(RunConfig::default()),
    }
}

fn out_dir(common: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .context("no output directory: pass --out or set out_dir in the config")?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(seed) = args.common.seed {
        cfg.scenario.seed = seed;
    }
    let dir = out_dir(&args.common, &cfg)?;
    let world = generate(&cfg.scenario)?;
    let manifest = write_world(&dir, &world, &cfg.hash()?)?;
    println!(
        "wrote {} files to {} (seed {}, config {})",
        manifest.files.len(),
        dir.display(),
        manifest.seed,
        &manifest.config_hash[..12]
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(seed) = args.common.seed {
        cfg.train.seed = seed;
    }
    let variant: Variant = match args.variant.as_deref() {
        Some(name) => name.parse()?,
        None => cfg.variant.unwrap_or(Variant::CdaFta),
    };
    let dir = out_dir(&args.common, &cfg)?;
    let world =
        read_world(&args.world).with_context(|| format!("loading {}", args.world.display()))?;
    if variant.uses_ground() && world.ground.is_none() {
        eprintln!("note: world has no ground modality; {variant} falls back to SDM(text, aerial)");
    }
    let outcome = run_experiment(&world, variant, &cfg.alignment, &cfg.train)?;
    let first = outcome.trace.first().map(|s| s.loss);
    let last = outcome.trace.last().map(|s| s.loss);

    Checkpoint {
        variant,
        config_hash: cfg.hash()?,
        alignment: cfg.alignment,
        train: cfg.train,
        params: outcome.params,
    }
    .write(&dir.join("checkpoint.json"))?;
    write_trace(&dir.join("trace.jsonl"), &outcome.trace)?;
    write_report(&dir.join("report.json"), &outcome.report)?;
    write_text(&dir.join("report.txt"), &outcome.report.to_table())?;

    if let (Some(a), Some(b)) = (first, last) {
        println!(
            "{variant}: loss {a:.4} -> {b:.4} over {} steps",
            outcome.trace.len()
        );
    }
    print!("{}", outcome.report.to_table());
    Ok(())
}

fn load_side(path: &Path) -> Result<(fuzzyalign::numeric::Matrix, Vec<u32>)> {
    let file = EmbeddingFile::read(path)?;
    let ids = file.ids().map(<[u32]>::to_vec).ok_or_else(|| {
        fuzzyalign::Error::CorruptFile(format!("{}: no identities", path.display()))
    })?;
    Ok((file.to_matrix()?, ids))
}

#[derive(Serialize)]
struct CmcRow {
    rank: usize,
    matched: f64,
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().context("flushing csv")
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (q, qi) = load_side(&args.query)?;
    let (g, gi) = load_side(&args.gallery)?;
    let task = RetrievalTask::new(q, g, qi, gi)?;
    let report = evaluate(&task, &DEFAULT_CUTOFFS)?;
    std::fs::create_dir_all(&args.out)?;
    write_report(&args.out.join("report.json"), &report)?;
    write_text(&args.out.join("report.txt"), &report.to_table())?;
    let cmc = report.cmc.iter().enumerate().map(|(i, &m)| CmcRow {
        rank: i + 1,
        matched: m,
    });
    fuzzyalign::io::atomic_write(&args.out.join("cmc.csv"), &csv_bytes(cmc)?)?;
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    k: f64,
    alpha_variance: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let ck = Checkpoint::read(&args.checkpoint)?;
    let world = read_world(&args.world)?;
    if ck.params.dim() != world.dim() {
        bail!(fuzzyalign::Error::CorruptFile(format!(
            "checkpoint dimension {} does not match world dimension {}",
            ck.params.dim(),
            world.dim()
        )));
    }
    std::fs::create_dir_all(&args.out)?;
    let write =
        |name: &str, bytes: Vec<u8>| fuzzyalign::io::atomic_write(&args.out.join(name), &bytes);

    if world.ground.is_some() {
        let gates = gate_records(&world, &ck.params, ck.alignment.k)?;
        let delta: Vec<f64> = gates.iter().map(|r| r.delta).collect();
        let sweep = k_sweep(&delta, &K_SWEEP)
            .into_iter()
            .map(|(k, v)| SweepRow {
                k,
                alpha_variance: v,
            });
        write("k_sweep.csv", csv_bytes(sweep)?)?;
        println!(
            "gates: {} samples, mean delta {:.4}, mean alpha {:.4}",
            gates.len(),
            mean(delta.iter().copied()),
            mean(gates.iter().map(|r| r.alpha))
        );
        write("gate.csv", csv_bytes(gates)?)?;
    } else {
        eprintln!("note: world has no ground modality; skipping gate dump and k sweep");
    }

    match ck.variant.weighting() {
        Some(weighting) => {
            let records = membership_records(&world, &ck.params, weighting)?;
            let heavy = mean(
                records
                    .iter()
                    .filter(|r| r.dropped_fraction >= 0.5)
                    .map(|r| r.mu_aerial),
            );
            let light = mean(
                records
                    .iter()
                    .filter(|r| r.dropped_fraction < 0.5)
                    .map(|r| r.mu_aerial),
            );
            println!("aerial membership: {heavy:.4} (>= half dropped) vs {light:.4} (less)");
            write("membership.csv", csv_bytes(records)?)?;
        }
        None => eprintln!(
            "note: {} has no token branch; skipping membership dump",
            ck.variant
        ),
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let entries = run_suite(args.seed)?;
    println!(
        "{:<5} {:>2} {:>2} {:>12} {:>8}",
        "loss", "B", "D", "max error", "entries"
    );
    for e in &entries {
        println!(
            "{:<5} {:>2} {:>2} {:>12.3e} {:>8}{}",
            e.loss,
            e.batch,
            e.dim,
            e.max_error,
            e.entries_checked,
            if e.passed() { "" } else { "  FAIL" }
        );
    }
    let worst = entries.iter().map(|e| e.max_error).fold(0.0, f64::max);
    println!("worst {worst:.3e} (tolerance {SUITE_TOLERANCE:e})");
    if entries.iter().any(|e| !e.passed()) {
        bail!("gradient check failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}
