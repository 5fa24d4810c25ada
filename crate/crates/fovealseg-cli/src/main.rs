//! Operator surface: synthetic data generation, dataset preprocessing,
//! training, evaluation, schedule simulation, gaze-trace analysis, FLOP
//! reports and the kernel-size ablation harness.

mod artifacts;
mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

/// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    /// Classify library errors: anything caused by inputs or configuration
    /// exits 2, the rest exits 1.
    pub fn from_lib(e: fovealseg::Error) -> Self {
        use fovealseg::Error as E;
        match &e {
            E::Config(_)
            | E::Validation(_)
            | E::Parse { .. }
            | E::InvalidDimension(_)
            | E::InvalidThreshold(_)
            | E::InvalidKernel(_)
            | E::EmptyData(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<fovealseg::Error> for CliError {
    fn from(e: fovealseg::Error) -> Self {
        CliError::from_lib(e)
    }
}

#[derive(Parser)]
#[command(
    name = "fovealseg",
    about = "Gaze-conditioned instance-of-interest segmentation toolkit",
    version
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root random seed (overrides the config key).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra key=value overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and/or frame sequence.
    Synth(commands::SynthArgs),
    /// Preprocess an annotated dataset into gaze-conditioned samples.
    Preprocess(commands::PreprocessArgs),
    /// Train the model (head pretraining plus alternating stages).
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Evaluate(commands::EvaluateArgs),
    /// Run the frame scheduler over a sequence and report FLOPs.
    Schedule(commands::ScheduleArgs),
    /// Segment-partition and gaze statistics for a sequence.
    AnalyzeTrace(commands::AnalyzeTraceArgs),
    /// Print the analytic FLOP table.
    Flops(commands::FlopsArgs),
    /// Kernel-size ablation: IoU and grid FLOPs per sigma.
    AblateKernel(commands::AblateKernelArgs),
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    for pair in &cli.common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let run_config = config::RunConfig::resolve(cli.common.config.as_deref(), &overrides)?;
    let out = cli.common.out.clone();
    match cli.command {
        Command::Synth(args) => commands::synth(args, &run_config, out),
        Command::Preprocess(args) => commands::preprocess(args, &run_config, out),
        Command::Train(args) => commands::train(args, &run_config, out),
        Command::Evaluate(args) => commands::evaluate(args, &run_config, out),
        Command::Schedule(args) => commands::schedule(args, &run_config, out),
        Command::AnalyzeTrace(args) => commands::analyze_trace(args, &run_config, out),
        Command::Flops(args) => commands::flops(args, &run_config, out),
        Command::AblateKernel(args) => commands::ablate_kernel(args, &run_config, out),
    }
}
