//! `d3`: data generation, teacher pretraining, student training, prediction,
//! evaluation and report rendering.

mod commands;
mod config;
mod imageio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use d3_core::{Error, Task};

use commands::Predictions;
use config::{parse_switch, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "d3", version, about = "Single-step dense prediction distilled from a diffusion teacher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every configurable command.
#[derive(Args, Debug)]
struct Common {
    /// Config file of `section.key=value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// `key=value` overrides; bare keys refer to the command's own section.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset of DPR1 samples with manifests.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the diffusion teacher on a dataset.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest or the directory holding `sources.tsv`.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Train the single-step student against a frozen teacher.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest or the directory holding `sources.tsv`.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Teacher checkpoint.
        #[arg(long, value_name = "FILE")]
        teacher: PathBuf,
        /// Held-out dataset evaluated every `train.eval_every` steps.
        #[arg(long, value_name = "PATH")]
        heldout: Option<PathBuf>,
    },
    /// Predict dense maps for RGB images (PNG or DPR1) in one forward pass each.
    Predict {
        /// Student checkpoint.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Input images.
        #[arg(long = "input", value_name = "FILE", required = true)]
        inputs: Vec<PathBuf>,
        /// Output directory for `<stem>.dpr` and `<stem>.png`.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Accepted for uniformity; prediction draws no random numbers.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint or stored predictions against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest or the directory holding `sources.tsv`.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Student checkpoint to run.
        #[arg(long, value_name = "FILE", conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory laid out like the dataset holding one DPR1 prediction per sample.
        #[arg(long, value_name = "DIR")]
        predictions: Option<PathBuf>,
        /// Task of stored predictions.
        #[arg(long, default_value = "depth")]
        task: String,
        /// Affine-align depth before scoring (on|off).
        #[arg(long, value_name = "on|off")]
        align: Option<String>,
    },
    /// Render a ranking table from metrics files.
    Report {
        /// Metrics files, optionally as `label=path`.
        #[arg(value_name = "METRICS", required = true)]
        inputs: Vec<String>,
        /// Also write the table to this file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Accepted for uniformity; reports draw no random numbers.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(common: &Common, section: &str, extra: &[String]) -> d3_core::Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    RunConfig::load(common.config.as_deref(), &overrides, section, common.seed)
}

fn run(cli: Cli) -> d3_core::Result<()> {
    match cli.command {
        Command::GenData { common } => commands::gen_data(&load(&common, "data", &[])?, &common.out),
        Command::Pretrain { common, data } => commands::pretrain(&load(&common, "pretrain", &[])?, &data, &common.out),
        Command::Train {
            common,
            data,
            teacher,
            heldout,
        } => commands::train(
            &load(&common, "train", &[])?,
            &data,
            &teacher,
            heldout.as_deref(),
            &common.out,
        ),
        Command::Predict {
            checkpoint, inputs, out, ..
        } => commands::predict(&checkpoint, &inputs, &out),
        Command::Eval {
            common,
            data,
            checkpoint,
            predictions,
            task,
            align,
        } => {
            let extra: Vec<String> = match align {
                Some(a) => {
                    parse_switch("--align", &a)?;
                    vec![format!("eval.align={a}")]
                }
                None => Vec::new(),
            };
            let cfg = load(&common, "eval", &extra)?;
            let preds = match (&checkpoint, &predictions) {
                (Some(c), _) => Predictions::Checkpoint(c),
                (None, Some(d)) => Predictions::Directory(d, task.parse::<Task>()?),
                (None, None) => unreachable!("clap requires one of the two"),
            };
            let report = commands::eval(&cfg, &data, preds, &common.out)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Report { inputs, out, .. } => {
            print!("{}", commands::report(&inputs, out.as_deref())?);
            Ok(())
        }
    }
}

/// 2: configuration or usage, 3: I/O or file format, 4: numerical failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Version { .. } => 3,
        Error::NonFinite { .. } | Error::Degenerate(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if std::env::var("D3_REFERENCE_MODE").is_ok_and(|v| v == "1") {
        // Execution is already single-threaded; the flag is recorded for the run log.
        log::info!("reference mode: serial deterministic execution");
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("d3: error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
