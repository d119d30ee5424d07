//! `trimkv`: train teachers and retention gates, evaluate eviction policies,
//! export analysis CSVs, and benchmark bounded-cache decoding.
//!
//! Exit codes: 0 success, 1 I/O or checkpoint failure, 2 configuration or
//! usage error, 3 numeric divergence.

mod bench;
mod evaluate;
mod export;
mod failure;
mod manifest;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::Failure;

#[derive(Parser)]
#[command(name = "trimkv", version, about = "Learned KV-cache eviction with retention gates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct TrainArgs {
    /// Flat `key = value` training config
    #[arg(long)]
    config: PathBuf,
    /// Output run directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Teacher checkpoint (gate stage), overriding the config
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
pub struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Task spec, e.g. `recall:n_pairs=4,seq_len=48,vocab=64`; defaults to the checkpoint's task
    #[arg(long)]
    task: Option<String>,
    /// Comma-separated policies: trimkv, recency, sink[:S], h2o[:R], random[:SEED]
    #[arg(long, default_value = "trimkv")]
    policy: String,
    /// Comma-separated budgets: an integer, a percentage of the sequence length, or `full`
    #[arg(long, default_value = "25%")]
    budget: String,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Seed of the held-out sample stream
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prefill chunk size; 1 evicts after every token
    #[arg(long, default_value_t = 1)]
    chunk: usize,
    /// Record eviction trace and retention for the first sample
    #[arg(long)]
    trace: bool,
    /// Run directory for CSVs and the manifest
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
pub struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    context: usize,
    #[arg(long)]
    gen: usize,
    #[arg(long)]
    budget: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value = "trimkv")]
    policy: String,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 64)]
    chunk: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ExportWhat {
    Retention,
    Trace,
    Sparsity,
    Deviation,
}

#[derive(Args, Clone)]
pub struct ExportArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum)]
    what: ExportWhat,
    /// Destination directory (default: RUN/export)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-attention teacher
    TrainTeacher(TrainArgs),
    /// Train retention gates on a frozen teacher
    TrainGates(TrainArgs),
    /// Decode held-out samples under eviction policies and budgets
    Evaluate(EvaluateArgs),
    /// Compare full-cache and bounded-cache decoding speed
    Bench(BenchArgs),
    /// Render recorded run artifacts as CSV
    Export(ExportArgs),
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("TRIMKV_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Failure::config(format!("TRIMKV_THREADS must be a non-negative integer, got {v:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::TrainTeacher(a) => train::run(trimkv::train::Stage::Teacher, &a, &argv),
        Command::TrainGates(a) => train::run(trimkv::train::Stage::Gates, &a, &argv),
        Command::Evaluate(a) => evaluate::run(&a, &argv),
        Command::Bench(a) => bench::run(&a, &argv),
        Command::Export(a) => export::run(&a, &argv),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
