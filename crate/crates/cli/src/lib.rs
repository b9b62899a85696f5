//! Command-line front end for the rehabgan library.
//!
//! `preprocess` turns a manifest of raw repetitions into a labeled dataset
//! directory, `train` fits one of the model variants on it, `generate`
//! samples synthetic sequences from a checkpoint, `evaluate` scores the
//! validation split and `report` tabulates finished runs. `synth` writes a
//! damped-sinusoid stand-in recording set for trying the pipeline without
//! the real data.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rehabgan::models::VariantChoice;
use rehabgan::ErrorClass;

pub use commands::run;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Env var capping worker threads.
pub const THREADS_ENV: &str = "REHABGAN_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "rehabgan",
    version,
    about = "GANs for rehabilitation movement sequences"
)]
pub struct Cli {
    /// More log output; repeat for debug detail.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic recording set and its manifest.
    Synth(SynthArgs),
    /// Resample, select dimensions, scale, pad, label and split a manifest.
    Preprocess(PreprocessArgs),
    /// Train a model variant on a preprocessed dataset.
    Train(TrainArgs),
    /// Sample synthetic sequences from a trained generator.
    Generate(GenerateArgs),
    /// Score a dataset split with a trained discriminator.
    Evaluate(EvaluateArgs),
    /// Tabulate training reports.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MovementArg {
    Movement1,
    Movement2,
    Custom,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Repetitions per class.
    #[arg(long, default_value_t = 90)]
    pub per_class: usize,
    /// Nominal raw length of each repetition.
    #[arg(long, default_value_t = 240)]
    pub len: usize,
    /// Signal channels; the rest of the columns carry low-level noise.
    #[arg(long, default_value_t = 3)]
    pub signal_dims: usize,
    #[arg(long, default_value_t = 3)]
    pub columns: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = MovementArg::Movement1)]
    pub movement: MovementArg,
    /// Dimensions kept after variance ranking; presets accept 3 or 10.
    #[arg(long, default_value_t = 10)]
    pub dims: usize,
    /// Fail unless every raw file has exactly this many columns.
    #[arg(long)]
    pub raw_columns: Option<usize>,
    /// Custom only: common length before padding, median when omitted.
    #[arg(long)]
    pub target_len: Option<usize>,
    /// Custom only: rows repeated at each end.
    #[arg(long)]
    pub pad: Option<usize>,
    /// Custom only: label normalization.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Custom only: training repetitions per class.
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// gan, dcgan1, dcgan2, wgan, rgan, or a -disc form (not wgan-disc).
    #[arg(long, value_parser = parse_variant)]
    pub variant: VariantChoice,
    /// Defaults to 1000, or 2000 for -disc variants.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = rehabgan::train::DEFAULT_BATCH)]
    pub batch: usize,
    /// Independent runs; their C values are summarized as mean and spread.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Early-stopping patience in epochs for -disc variants.
    #[arg(long, default_value_t = rehabgan::train::DEFAULT_PATIENCE)]
    pub patience: usize,
    /// Critic steps per generator step for wgan.
    #[arg(long, default_value_t = rehabgan::train::DEFAULT_N_CRITIC)]
    pub n_critic: usize,
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    #[arg(long)]
    pub g_lr: Option<f64>,
    #[arg(long)]
    pub d_lr: Option<f64>,
    /// Stop after the epoch that crosses this many seconds.
    #[arg(long)]
    pub time_limit: Option<f64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset whose validation split the samples are compared against.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Predictions CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json` or `summary.json` files written by `train`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<VariantChoice, String> {
    s.parse().map_err(|e: rehabgan::Error| e.to_string())
}

/// Misuse detected by the CLI itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<rehabgan::Error>() {
            return match e.class() {
                ErrorClass::Usage => EXIT_USAGE,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numerical => EXIT_NUMERICAL,
            };
        }
    }
    EXIT_DATA
}

/// Thread count requested through [`THREADS_ENV`], if any.
pub fn requested_threads(value: Option<&str>) -> anyhow::Result<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// The error and its causes on one line, skipping causes whose text the
/// previous message already ends with.
pub fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if msg.ends_with(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

#[cfg(test)]
mod tests {
    use anyhow::Context;

    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        let data: anyhow::Error = rehabgan::Error::Format("bad".into()).into();
        assert_eq!(exit_code(&data), EXIT_DATA);
        let numerical = rehabgan::Error::Training {
            epoch: 3,
            batch: 1,
            source: Box::new(rehabgan::Error::NonFinite("loss".into())),
        };
        assert_eq!(
            exit_code(&anyhow::Error::from(numerical).context("training")),
            EXIT_NUMERICAL
        );
        assert_eq!(exit_code(&rehabgan::Error::invalid("x").into()), EXIT_USAGE);
        assert_eq!(exit_code(&usage("y")), EXIT_USAGE);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), EXIT_DATA);
    }

    #[test]
    fn describe_drops_repeated_causes() {
        let err = Err::<(), _>(rehabgan::Error::Training {
            epoch: 1,
            batch: 2,
            source: Box::new(rehabgan::Error::NonFinite("matmul".into())),
        })
        .context("training")
        .unwrap_err();
        let text = describe(&err);
        assert!(
            text.starts_with("training: training failed at epoch 1, batch 2"),
            "{text}"
        );
        assert_eq!(text.matches("matmul").count(), 1, "{text}");
    }

    #[test]
    fn thread_setting() {
        assert_eq!(requested_threads(None).unwrap(), None);
        assert_eq!(requested_threads(Some(" 4 ")).unwrap(), Some(4));
        assert!(requested_threads(Some("0")).is_err());
        assert!(requested_threads(Some("many")).is_err());
    }
}
