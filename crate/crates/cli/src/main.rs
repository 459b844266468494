//! `sammil`: synthesize datasets, train, evaluate, run ablation grids,
//! check gradients and import adapter output.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sammil_core::error::ErrorClass;

#[derive(Debug, Parser)]
#[command(
    name = "sammil",
    version,
    about = "Segment-guided multiple instance learning for slide classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a parameter file.
    Synth(SynthArgs),
    /// Cross-validated training on a dataset directory.
    Train(TrainArgs),
    /// Score a dataset with a checkpoint; prints the result as JSON.
    Eval(EvalArgs),
    /// Run an ablation grid and write the results CSV.
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck(GradcheckArgs),
    /// Import slide directories written by the segmentation adapter.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Synthetic dataset parameters (JSON).
    params: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the parameter file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory.
    dataset: PathBuf,
    /// Run configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "dry_run")]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
    /// Write every applied mask plan to masks.jsonl.
    #[arg(long)]
    dump_masks: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    /// `all`, or a fold tag from the dataset manifest.
    #[arg(long, default_value = "all")]
    split: String,
    /// Also write eval.json and per-slide scores.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Grid file (JSON).
    grid: PathBuf,
    /// Output CSV.
    #[arg(long, required_unless_present = "dry_run")]
    out: Option<PathBuf>,
    /// Overrides the grid's fold seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
    /// List the configurations and run count, then exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// d_in,d,h,c
    #[arg(long, default_value = "16,8,4,2")]
    dims: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Instances in the random bag.
    #[arg(long, default_value_t = 12)]
    instances: usize,
    /// Perturb one analytic gradient entry; the check must then fail.
    #[arg(long)]
    corrupt: bool,
    /// Run configuration supplying the loss weights and masking setup.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    /// Slide directories, or directories containing them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Dataset name; defaults to the output directory name.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    force: bool,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
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
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Convert(a) => commands::convert(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
