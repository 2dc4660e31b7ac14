use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ddlab_cli::commands::{cmd_distill, cmd_eval, cmd_sample, cmd_sweep, cmd_train_teacher, DistillRun};
use ddlab_cli::{CliResult, Experiment, Overrides};

/// Environment variable holding the log filter.
const LOG_ENV: &str = "DDLAB_LOG";

#[derive(Parser)]
#[command(name = "ddlab", version, about = "Discrete diffusion distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher denoiser.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Distill a few-step generator from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint (default: OUT/teacher.ckpt).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Resume from a distillation state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps and save the state.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to sample (default: OUT/generator.ckpt, else OUT/teacher.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate metrics and print one JSON record per metric.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Metric to compute; repeat to replace the config list.
        #[arg(long = "metric")]
        metrics: Vec<String>,
    },
    /// Evaluate metrics at each value of one sampling parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Config key to vary, e.g. sample.steps.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn load(common: &Common, metrics: Vec<String>) -> CliResult<Experiment> {
    let overrides = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        metrics,
    };
    Experiment::load(&common.config, &overrides)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::TrainTeacher { common } => {
            cmd_train_teacher(&load(&common, Vec::new())?)?;
        }
        Command::Distill {
            common,
            teacher,
            resume,
            stop_at,
        } => {
            let run = DistillRun {
                teacher,
                resume,
                stop_at,
            };
            cmd_distill(&load(&common, Vec::new())?, &run)?;
        }
        Command::Sample { common, checkpoint } => {
            cmd_sample(&load(&common, Vec::new())?, checkpoint.as_deref())?;
        }
        Command::Eval {
            common,
            checkpoint,
            metrics,
        } => {
            cmd_eval(&load(&common, metrics)?, checkpoint.as_deref())?;
        }
        Command::Sweep {
            common,
            checkpoint,
            axis,
            values,
        } => {
            cmd_sweep(&load(&common, Vec::new())?, checkpoint.as_deref(), &axis, &values)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("ddlab: {e}");
        std::process::exit(e.exit_code());
    }
}
