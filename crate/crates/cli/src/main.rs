use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "cdr", version, about = "Causal disentangled recommendation: data, training, inference and evaluation")]
struct Cli {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a delimited interaction log, filter, split and write a dataset.
    Ingest(IngestArgs),
    /// Sample a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Train a model and write its best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint with all-ranking Recall/NDCG.
    Eval(EvalArgs),
    /// Write top-k recommendations.
    Infer(InferArgs),
    /// Recommend for one user after replacing environment factors with a donor's.
    Intervene(InterveneArgs),
    /// Train and evaluate once per value of one config key.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lambda3=1e-4`. Repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Column roles in file order: user, item, rating, timestamp, or `-` to ignore.
    #[arg(long, default_value = "user,item,rating,timestamp")]
    columns: String,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    /// Skip the first line.
    #[arg(long)]
    header: bool,
    #[arg(long, default_value_t = 4.0)]
    rating_threshold: f64,
    #[arg(long, default_value_t = 20)]
    min_user: usize,
    #[arg(long, default_value_t = 20)]
    min_item: usize,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 100)]
    items: usize,
    #[arg(long, default_value_t = 2)]
    categories: usize,
    #[arg(long, default_value_t = 8)]
    latent: usize,
    /// Environments per user, the last two held out for validation and test.
    #[arg(long, default_value_t = 4)]
    envs: usize,
    #[arg(long, default_value_t = 20)]
    per_env: usize,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 0.5)]
    shifted: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset written by `ingest` or `synth`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct ScoringArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// latest-z, avg-predictions or avg-e (or 1, 2, 3).
    #[arg(long, default_value = "latest-z")]
    strategy: String,
    /// Inference environments; defaults to the checkpoint's T_i.
    #[arg(long)]
    t_i: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "10,20")]
    cutoffs: String,
    /// Ground-truth sidecar from `synth`; enables the shift-group report.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    groups: usize,
    /// Use symmetric category KL in the shift-group report.
    #[arg(long)]
    symmetric_kl: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Comma-separated user keys; all users when omitted.
    #[arg(long)]
    users: Option<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct InterveneArgs {
    #[command(flatten)]
    scoring: ScoringArgs,
    /// User whose recommendations are recomputed.
    #[arg(long)]
    user: String,
    /// User whose inferred environment factors are substituted.
    #[arg(long)]
    donor: String,
    /// latest, all, or a 0-based environment index.
    #[arg(long, default_value = "latest")]
    target: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// `KEY=A..B` (inclusive integer range) or `KEY=v1,v2,...`.
    #[arg(long)]
    grid: String,
    #[arg(long, default_value = "10,20")]
    cutoffs: String,
    #[command(flatten)]
    out: OutArg,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let workers = cli.workers.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    match cdr_core::par::with_threads(workers, || commands::dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
