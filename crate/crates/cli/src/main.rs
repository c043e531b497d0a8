//! `erase`: entropy maps, two-stage pruning runs, policy search and cost reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure split by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<erase_core::Error> for Failure {
    fn from(e: erase_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

pub type CmdResult = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "erase", version, about = "Entropy-guided two-stage vision-token pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-patch entropy map, heatmap and low/high-entropy masks of one image.
    Analyze(AnalyzeArgs),
    /// Stage 1 only: complexity level and entropy-ranked token selection.
    Prune(PruneArgs),
    /// Full two-stage run with an attention source, plus its KV/prefill cost.
    Pipeline(PipelineArgs),
    /// Search thresholds and pruning ratios on a synthetic benchmark.
    Optimize(OptimizeArgs),
    /// Token/KV scaling tables and statistics over saved pipeline results.
    Report(ReportArgs),
    /// Generate a synthetic benchmark directory.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
pub struct PolicyArgs {
    /// Built-in model id or path to a policy JSON file.
    #[arg(long, default_value = "qwen2.5-vl-7b")]
    pub policy: String,
    /// Patch size override, `HxW` (or a single number for square patches).
    #[arg(long, value_name = "HxW")]
    pub patch_size: Option<String>,
    /// Histogram bins override (1..=256).
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Entropy split for the low/high masks; defaults to the image's global entropy.
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// `synthetic[:<seed>]` or `dump:<dir>`.
    #[arg(long)]
    pub attn: String,
    /// Final token budget: an integer count, or a fraction 0 < f < 1 of the original tokens.
    #[arg(long)]
    pub k_final: Option<String>,
    /// Text tokens assumed by the KV/prefill cost report.
    #[arg(long, default_value_t = 64)]
    pub text_tokens: usize,
    /// Seed for `--attn synthetic` without an explicit seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    /// Template policy: patch size, bins and layers are taken from it.
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Benchmark directory written by `erase bench`; generated from --seed when omitted.
    #[arg(long)]
    pub bench: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub bench_count: usize,
    /// Number of complexity levels.
    #[arg(long, default_value_t = erase_core::optimizer::DEFAULT_LEVELS)]
    pub levels: usize,
    #[arg(long, default_value_t = erase_core::optimizer::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = erase_core::optimizer::DEFAULT_ITERATIONS)]
    pub iterations: usize,
    /// Final budget during evaluation; by default every stage-1 token is kept.
    #[arg(long)]
    pub k_final: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// `result.json` files written by `erase pipeline`.
    #[arg(long, num_args = 1..)]
    pub results: Vec<PathBuf>,
    /// Model id or policy file; its KV geometry and patch size drive the scaling table.
    #[arg(long, default_value = "qwen2.5-vl-7b")]
    pub policy: String,
    /// Long-side resolutions for the scaling table.
    #[arg(long, value_delimiter = ',', default_values_t = [512, 1024, 1536, 2048, 2560, 3072, 3584, 4096])]
    pub sides: Vec<usize>,
    /// Width / height.
    #[arg(long, default_value_t = 1.0)]
    pub aspect: f64,
    #[arg(long, default_value_t = 64)]
    pub text_tokens: usize,
    /// Final budget for the pruned KV column; defaults to the policy's.
    #[arg(long)]
    pub k_final: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub count: usize,
    #[arg(long, default_value_t = 28)]
    pub patch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ERASE_LOG", "warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::Prune(a) => commands::prune(a),
        Command::Pipeline(a) => commands::pipeline(a),
        Command::Optimize(a) => commands::optimize(a),
        Command::Report(a) => commands::report(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {}", chain_message(&e));
            ExitCode::from(2)
        }
    }
}

/// Joins the error chain, skipping causes whose text the previous level already includes.
fn chain_message(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
        last = text;
    }
    msg
}
