//! `defacer` — volumetric MRI defacing from the command line.
//!
//! Subcommands: make-phantoms, train, deface, evaluate, bench, inspect,
//! summary. Exit codes are a stable contract: 0 success, 1 generic error,
//! 2 I/O error, 3 numerical abort, 4 empty input.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use defacer_core::Error;

#[derive(Parser)]
#[command(name = "defacer", version, about = "3D U-Net MRI defacing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonOpts {
    /// Key=value config file (flags take precedence over it).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom corpus with ground-truth masks.
    MakePhantoms {
        #[command(flatten)]
        common: CommonOpts,
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of phantoms.
        #[arg(long)]
        count: usize,
        /// Number of distinct acquisition protocols (>= 3).
        #[arg(long, default_value_t = 10)]
        protocols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a phantom corpus.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Corpus directory (or data_dir config / DEFACER_DATA_DIR).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model variant: deepdefacer | baseline.
        #[arg(long, default_value = "deepdefacer")]
        variant: String,
        /// Encoder filters, e.g. 4,8,16,32 (default: canonical per variant).
        #[arg(long)]
        filters: Option<String>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Adam learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Disable rigid augmentation.
        #[arg(long, default_value_t = false)]
        no_augment: bool,
        /// Validate every N iterations (0 = never).
        #[arg(long, default_value_t = 50)]
        val_every: u64,
        /// Checkpoint every N iterations (0 = never).
        #[arg(long, default_value_t = 50)]
        checkpoint_every: u64,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Grid shrink factor for preprocessing.
        #[arg(long)]
        shrink: Option<f64>,
        /// Resume from an existing weights file instead of a fresh
        /// initialization (variant/filters are taken from the file).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Final model file.
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration metrics (JSON lines; wall-clock times vary).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Deterministic training report (JSON, no timing).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Deface one scan with a trained model.
    Deface {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the predicted binary mask.
        #[arg(long)]
        mask_out: Option<PathBuf>,
        #[arg(long)]
        shrink: Option<f64>,
    },
    /// Evaluate a model over one split of a corpus.
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Machine-readable report (JSON lines).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        shrink: Option<f64>,
    },
    /// Time end-to-end defacing for two models on identical input.
    Bench {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        /// Input dims, e.g. 128x128x128.
        #[arg(long, default_value = "128x128x128")]
        dims: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Comma-separated thread counts, e.g. 1,2.
        #[arg(long = "bench-threads", default_value = "1")]
        bench_threads: String,
        #[arg(long)]
        shrink: Option<f64>,
        /// External defacing command to time on the same file; `{in}` and
        /// `{out}` are substituted.
        #[arg(long)]
        external: Option<String>,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Scratch directory for bench inputs/outputs (default: temp).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Dump the parsed header of a .nii file.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Print the per-layer summary of a weights file.
    Summary {
        #[arg(long)]
        model: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => 2,
        Error::NumericalAbort { .. } => 3,
        Error::EmptyInput(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let result = match cli.command {
        Command::MakePhantoms {
            common,
            out,
            count,
            protocols,
            seed,
        } => commands::make_phantoms(&common, &out, count, protocols, seed),
        Command::Train {
            common,
            data,
            variant,
            filters,
            iters,
            seed,
            lr,
            no_augment,
            val_every,
            checkpoint_every,
            checkpoint_dir,
            shrink,
            init,
            out,
            metrics,
            report,
        } => commands::train(commands::TrainArgs {
            common,
            data,
            variant,
            filters,
            iters,
            seed,
            lr,
            no_augment,
            val_every,
            checkpoint_every,
            checkpoint_dir,
            shrink,
            init,
            out,
            metrics,
            report,
        }),
        Command::Deface {
            common,
            model,
            input,
            out,
            mask_out,
            shrink,
        } => commands::deface(&common, &model, &input, &out, mask_out.as_deref(), shrink),
        Command::Evaluate {
            common,
            model,
            data,
            split,
            report,
            shrink,
        } => commands::evaluate(&common, &model, data, &split, report.as_deref(), shrink),
        Command::Bench {
            common,
            model_a,
            model_b,
            dims,
            reps,
            bench_threads,
            shrink,
            external,
            seed,
            out_dir,
        } => commands::bench(commands::BenchArgs {
            common,
            model_a,
            model_b,
            dims,
            reps,
            bench_threads,
            shrink,
            external,
            seed,
            out_dir,
        }),
        Command::Inspect { input } => commands::inspect(&input),
        Command::Summary { model } => commands::summary(&model),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
