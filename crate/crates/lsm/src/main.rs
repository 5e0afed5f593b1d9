//! Thin command-line front end; all logic lives in the library.
//!
//! Exit codes: 0 success, 2 configuration validation failure, 3 runtime
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lsm::cli::{
    cmd_analyze, cmd_eval, cmd_gen_data, cmd_sweep, cmd_train, EvalDataset, MatchingMode,
    SweepParameter,
};
use lsm::LsmError;

#[derive(Parser)]
#[command(name = "lsm", about = "Low-confidence sample mining for semi-supervised detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatchingArg {
    Greedy,
    BestIou,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParameterArg {
    Alpha,
    T,
    PimLevels,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a config file; writes checkpoints, a metric log, and the
    /// resolved config into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Repeated key=value settings applied over the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's teacher model.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// COCO images directory (with --annotations).
        #[arg(long, requires = "annotations")]
        images: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Synthetic evaluation set size when no COCO paths are given.
        #[arg(long, default_value_t = 60)]
        synthetic_images: usize,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        #[arg(long, default_value_t = 7)]
        data_seed: u64,
        /// Also write the EvalResult JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pseudo-label quality analysis: binned mean IoU, IoU-vs-area scatter,
    /// score-vs-IoU table, as CSV plus SVG.
    Analyze {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truths: PathBuf,
        #[arg(long, default_value = "analysis")]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = MatchingArg::Greedy)]
        matching: MatchingArg,
        #[arg(long, default_value_t = 0.5)]
        iou_floor: f64,
    },
    /// Train one run per value of a swept parameter and tabulate final mAP.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_enum)]
        parameter: ParameterArg,
        /// Comma-separated values; for pim-levels use ';' between subsets
        /// (e.g. "2,3;3,4;2,3,4").
        #[arg(long)]
        values: String,
        /// Run sweep points concurrently.
        #[arg(long, default_value_t = false)]
        parallel: bool,
    },
    /// Write a synthetic shapes dataset to disk in COCO schema.
    GenData {
        #[arg(long, default_value_t = 200)]
        n_images: usize,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> lsm::Result<()> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            resume,
        } => {
            cmd_train(&config, &overrides, resume.as_deref())?;
            Ok(())
        }
        Command::Eval {
            checkpoint,
            images,
            annotations,
            synthetic_images,
            image_size,
            data_seed,
            out,
        } => {
            let dataset = match (images, annotations) {
                (Some(images_dir), Some(ann)) => EvalDataset::Coco {
                    images_dir,
                    annotations: ann,
                },
                _ => EvalDataset::Synthetic {
                    n_images: synthetic_images,
                    image_size,
                    seed: data_seed,
                },
            };
            cmd_eval(&checkpoint, &dataset, out.as_deref())?;
            Ok(())
        }
        Command::Analyze {
            predictions,
            truths,
            out_dir,
            matching,
            iou_floor,
        } => {
            let mode = match matching {
                MatchingArg::Greedy => MatchingMode::GreedyOneToOne,
                MatchingArg::BestIou => MatchingMode::BestIouPerPrediction,
            };
            let report = cmd_analyze(&predictions, &truths, &out_dir, mode, iou_floor)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("serialize report")
            );
            Ok(())
        }
        Command::Sweep {
            config,
            overrides,
            parameter,
            values,
            parallel,
        } => {
            let (param, split_char) = match parameter {
                ParameterArg::Alpha => (SweepParameter::Alpha, ','),
                ParameterArg::T => (SweepParameter::T, ','),
                ParameterArg::PimLevels => (SweepParameter::PimLevels, ';'),
            };
            let values: Vec<String> = values
                .split(split_char)
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            cmd_sweep(&config, &overrides, param, &values, parallel)?;
            Ok(())
        }
        Command::GenData {
            n_images,
            image_size,
            seed,
            out_dir,
        } => cmd_gen_data(n_images, image_size, seed, &out_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err @ LsmError::ConfigValidation(_)) => {
            eprintln!("{err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(3)
        }
    }
}
