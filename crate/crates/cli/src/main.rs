mod checks;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Group-robust linear probing on precomputed features.
#[derive(Debug, Parser)]
#[command(name = "ppa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic feature container, proxy container and sidecar.
    Gen(GenArgs),
    /// Train one method end to end and evaluate it on the test split.
    Train(TrainArgs),
    /// Retrain the debiased stage for each τ on a grid.
    SweepTau(SweepArgs),
    /// Run the numerical certificates.
    Verify(VerifyArgs),
    /// Compare minority identification of the plain and projected biased models.
    Identify(TrainArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Named preset.
    #[arg(long, default_value = "synthetic-waterbirds", conflicts_with = "spec")]
    preset: String,
    /// JSON synthetic spec instead of a preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Recipe {
    /// Defaults for high-dimensional backbone features.
    Backbone,
    /// Short schedule for the low-dimensional synthetic presets.
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FirstStage {
    /// Cross-entropy model on raw features.
    Erm,
    /// Biased model on projected features.
    Projected,
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    proxies: PathBuf,
    #[arg(long, default_value = "ppa")]
    method: String,
    #[arg(long, value_enum, default_value_t = Recipe::Backbone)]
    recipe: Recipe,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_enum)]
    normalize: Option<Toggle>,
    /// Fraction of pseudo-group labels to corrupt before the debiasing stage.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Error-set upweighting factor for jtt.
    #[arg(long)]
    lambda: Option<f64>,
    /// Model whose training errors jtt upweights.
    #[arg(long, value_enum, default_value_t = FirstStage::Erm)]
    jtt_first_stage: FirstStage,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 1.0, 1.5, 2.0])]
    tau_grid: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    All,
    Projection,
    Prop1,
    Lemma1,
    Prop2,
    Gradients,
    Aggregation,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Which::All)]
    which: Which,
    /// Number of random instances per check.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    json: bool,
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::SweepTau(a) => commands::sweep_tau(&a),
        Command::Identify(a) => commands::identify(&a),
        Command::Verify(a) => match checks::run(&a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_VERIFY),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(core) = e.downcast_ref::<ppa_core::Error>() {
        return if core.is_validation() {
            EXIT_VALIDATION
        } else {
            EXIT_RUNTIME
        };
    }
    if e.downcast_ref::<commands::UsageError>().is_some() {
        return EXIT_VALIDATION;
    }
    EXIT_RUNTIME
}
