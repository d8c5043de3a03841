//! `pcc`: generate synthetic data, train, complete point clouds, evaluate
//! checkpoints and score point-cloud pairs.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numerical failure.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcc_core::training::Split;
use pcc_core::{AblationVariant, Error, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "pcc", version, about = "Image-guided point cloud completion")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Overrides the data seed (gen-data) or the training seed (train).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 2048-point clouds, 128-wide refiner.
    Desk,
    /// 256-point clouds and narrower layers for quick CPU runs.
    Compact,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantArg {
    Full,
    NoReconLoss,
    I2pOnly,
    P2pOnly,
}

impl From<VariantArg> for AblationVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Self::Full,
            VariantArg::NoReconLoss => Self::NoReconLoss,
            VariantArg::I2pOnly => Self::I2POnly,
            VariantArg::P2pOnly => Self::P2POnly,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Val => Self::Val,
            SplitArg::Test => Self::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/val/test splits of synthetic samples and a manifest.
    GenData,
    /// Train a model variant; writes checkpoints and history.csv.
    Train {
        /// Dataset root (defaults to paths.dataset from the config).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = VariantArg::Full)]
        variant: VariantArg,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Complete one partial cloud from an image.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        partial: PathBuf,
        /// Output file name, placed in the output directory.
        #[arg(long, default_value = "completion.xyz")]
        output: PathBuf,
        /// Also write every refinement stage.
        #[arg(long)]
        trace: bool,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        /// Required unless --gt-self is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// F-score threshold on squared distance (defaults to train.tau).
        #[arg(long)]
        tau: Option<f64>,
        /// Write bar and curve plots as PNG.
        #[arg(long)]
        plots: bool,
        /// Debug: score each ground truth against itself.
        #[arg(long)]
        gt_self: bool,
    },
    /// Chamfer distance and F-score of one prediction against ground truth.
    Metrics {
        pred: PathBuf,
        gt: PathBuf,
        #[arg(long, default_value_t = 0.001)]
        tau: f64,
    },
    /// List the parameters stored in a checkpoint.
    Inspect { checkpoint: PathBuf },
}

pub fn load_config(g: &Global) -> Result<PipelineConfig, Error> {
    let cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => match g.preset {
            Preset::Desk => PipelineConfig::default(),
            Preset::Compact => PipelineConfig::compact(),
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::GenData => commands::gen_data(g),
        Command::Train {
            dataset,
            variant,
            resume,
            max_epochs,
        } => commands::train(g, dataset, variant.into(), resume, max_epochs),
        Command::Complete {
            checkpoint,
            image,
            partial,
            output,
            trace,
        } => commands::complete(g, &checkpoint, &image, &partial, &output, trace),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            tau,
            plots,
            gt_self,
        } => commands::eval(g, checkpoint, dataset, split.into(), tau, plots, gt_self),
        Command::Metrics { pred, gt, tau } => commands::metrics(&pred, &gt, tau),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    }
}

/// Usage and configuration problems exit with 1, everything else with 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|c| {
        matches!(c.downcast_ref::<Error>(), Some(Error::Config(_)))
            || c.downcast_ref::<commands::UsageError>().is_some()
    });
    if usage {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
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
