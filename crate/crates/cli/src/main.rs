mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pkdn::net::NetKind;
use thiserror::Error;

use commands::{Baseline, EvalModel};
use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pkdn::Error),
    #[error("{0}")]
    Usage(String),
    #[error("self-test failed: {0}")]
    SelfTest(String),
}

impl CliError {
    /// 1 for bad input, 2 for failures while running.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_validation() => 1,
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

/// Prior knowledge distillation for face super-resolution.
#[derive(Debug, Parser)]
#[command(name = "pkdn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Directory receiving config.txt, train.tsv, checkpoints/ and the final checkpoint.
    #[arg(long)]
    run_dir: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable; wins over --config).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Gradient checks of every op, block and network, plus structural invariants (64-bit).
    Selftest {
        /// Negative control: halve the relu backward rule; the suite must fail.
        #[arg(long, hide = true)]
        corrupt_relu_backward: bool,
    },
    /// Write synthetic faces as hr/<stem>.png with parsing/<stem>.png label maps.
    Synth {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the teacher (input: low-resolution image plus parsing map).
    TrainTeacher(RunArgs),
    /// Distill a frozen teacher into the student.
    TrainStudent {
        #[command(flatten)]
        run: RunArgs,
        /// Trained teacher checkpoint; read only.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Score a checkpoint or a baseline on a directory dataset; writes metrics.tsv and metrics.json.
    Eval {
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "checkpoint")]
        baseline: Option<Baseline>,
        /// Upscaling factor of a baseline.
        #[arg(long, default_value_t = 4)]
        scale: usize,
        /// Parsing classes in the dataset when evaluating a baseline.
        #[arg(long, default_value_t = 19)]
        n_classes: usize,
        /// Directory with hr/ and parsing/.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Super-resolve one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Low-resolution RGB image.
        #[arg(long)]
        input: PathBuf,
        /// Parsing label map at the output size; required by teacher checkpoints.
        #[arg(long)]
        parsing: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Selftest { corrupt_relu_backward } => commands::selftest(corrupt_relu_backward),
        Command::Synth { count, size, seed, out } => commands::synth(count, size, seed, &out),
        Command::TrainTeacher(a) => {
            let cfg = RunConfig::load(a.config.as_deref(), &a.set)?;
            commands::train(NetKind::Teacher, &cfg, &a.run_dir, None, a.resume)
        }
        Command::TrainStudent { run: a, teacher } => {
            let cfg = RunConfig::load(a.config.as_deref(), &a.set)?;
            commands::train(NetKind::Student, &cfg, &a.run_dir, Some(&teacher), a.resume)
        }
        Command::Eval {
            checkpoint,
            baseline,
            scale,
            n_classes,
            data,
            out,
        } => {
            let model = match (checkpoint, baseline) {
                (Some(p), _) => EvalModel::Checkpoint(p),
                (None, Some(which)) => EvalModel::Baseline { which, scale, n_classes },
                (None, None) => unreachable!("clap requires one of them"),
            };
            commands::eval(model, &data, &out)
        }
        Command::Infer {
            checkpoint,
            input,
            parsing,
            output,
        } => commands::infer(&checkpoint, &input, parsing.as_deref(), &output),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
