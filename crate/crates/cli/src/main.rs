//! `sahp`: simulate Hawkes data, fit the classic baseline, train and evaluate
//! the self-attentive model, and run the synthetic reproduction.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error (missing or malformed
//! input, I/O), 4 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::UsageError;

#[derive(Parser)]
#[command(name = "sahp", version, about = "Self-attentive Hawkes process toolkit")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a multivariate Hawkes process by thinning.
    Simulate(SimulateArgs),
    /// Fit an exponential-kernel Hawkes process by maximum likelihood.
    FitHp(FitHpArgs),
    /// Train the attention model.
    Train(TrainArgs),
    /// Likelihood and prediction metrics for a checkpoint or Hawkes fit.
    Evaluate(EvaluateArgs),
    /// Next-event time and type predictions as CSV.
    Predict(ModelDataArgs),
    /// Per-type QQ data of model against true intensities.
    Qq(QqArgs),
    /// Type-to-type attention matrix of a checkpoint.
    Attn(ModelDataArgs),
    /// Simulate, fit, train and compare on the two-type benchmark process.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Process spec JSON (default: built-in two-type benchmark).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Number of sequences.
    #[arg(long)]
    pub n: Option<usize>,
    /// Train/val/test fractions, e.g. `0.8,0.1,0.1`.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct FitHpArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// One decay rate for all type pairs.
    #[arg(long)]
    pub shared_decay: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub intensity_scale: Option<f64>,
    /// `time_shifted` or `conventional`.
    #[arg(long)]
    pub encoding: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
}

#[derive(Args)]
pub struct ModelDataArgs {
    /// SAHP checkpoint or fitted Hawkes parameter JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `train`, `val` or `test` (default: test when labelled, else all).
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub io: ModelDataArgs,
    /// Spec of the generating process; adds intensity QQ data to the report.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
}

#[derive(Args)]
pub struct QqArgs {
    #[command(flatten)]
    pub io: ModelDataArgs,
    /// Spec of the generating process (default: built-in two-type benchmark).
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReproduceArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Multiplies the number of simulated sequences.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(UsageError("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global()?;
    }
    let global = commands::Global {
        config: cli.config,
        seed: cli.seed,
    };
    match cli.command {
        Command::Simulate(a) => commands::simulate(&global, a),
        Command::FitHp(a) => commands::fit_hp(&global, a),
        Command::Train(a) => commands::train(&global, a),
        Command::Evaluate(a) => commands::evaluate(&global, a),
        Command::Predict(a) => commands::predict(&global, a),
        Command::Qq(a) => commands::qq(&global, a),
        Command::Attn(a) => commands::attn(&global, a),
        Command::Reproduce(a) => commands::reproduce(&global, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<sahp_core::Error>() {
            return match e.root() {
                sahp_core::Error::InvalidArgument(_) => 2,
                sahp_core::Error::Numeric(_) => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
