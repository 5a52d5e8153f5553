//! `sphhn`: synthetic data, Granger graphs, training, evaluation and
//! gradient checks from the command line.
//!
//! Exit codes: 0 success, 1 input error, 2 usage error, 3 training
//! divergence, 4 gradient check failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "sphhn", version, about = "Causal spherical hypergraph networks")]
struct Cli {
    /// Run seed; components derive their own seeds from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON configuration for the command; flags given explicitly win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted causal edges.
    Synth(SynthArgs),
    /// Infer the Granger-causal graph of a dataset.
    Granger(GrangerArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// toy, small or medium. Required unless --config is given.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct GrangerArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=1000))]
    pub lag: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// pca1 or mean.
    #[arg(long, default_value = "pca1")]
    pub reduction: String,
    #[arg(long)]
    pub bonferroni: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Causal graph from `granger`. Required unless --no-causal.
    #[arg(long)]
    pub causal: Option<PathBuf>,
    /// Train without causal edges.
    #[arg(long)]
    pub no_causal: bool,
    /// Drop the entropy term (lambda1 = 0).
    #[arg(long)]
    pub no_entropy: bool,
    /// Skip sphere projections; dot-product attention.
    #[arg(long)]
    pub euclidean: bool,
    /// Expand hyperedges into 2-member cliques.
    #[arg(long)]
    pub pairwise: bool,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Causal graph the model was trained with.
    #[arg(long)]
    pub causal: Option<PathBuf>,
    /// Ground-truth edges for precision@K.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Fraction of input feature entries zeroed before evaluation.
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check the Euclidean variant.
    #[arg(long)]
    pub euclidean: bool,
    /// Perturb the analytic gradient (negative control).
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

pub struct Global {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub config: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    Usage(String),
    Diverged(String),
    Gradcheck(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let global = Global {
        seed: cli.seed,
        out: cli.out,
        config: cli.config,
    };
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(&global, a),
        Command::Granger(a) => commands::granger(&global, a),
        Command::Train(a) => commands::train(&global, a),
        Command::Eval(a) => commands::eval(&global, a),
        Command::Gradcheck(a) => commands::gradcheck(&global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            use clap::CommandFactory;
            Cli::command()
                .error(clap::error::ErrorKind::ValueValidation, msg)
                .exit()
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("error: training diverged: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Gradcheck(msg)) => {
            eprintln!("error: gradient check failed: {msg}");
            ExitCode::from(4)
        }
    }
}
