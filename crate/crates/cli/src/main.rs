//! `crowdadapt`: scene-adaptive crowd density estimation on a synthetic
//! multi-scene benchmark.
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error, 3 verification
//! failure (gradcheck).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crowdadapt_cli::commands::{
    adapt_scene, eval_model, gen_data, run_sweep, train_model, AdaptArgs, EvalArgs, GenDataArgs,
    ReportArgs, SweepKind, TrainArgs,
};
use crowdadapt_cli::gradcheck::{run_gradcheck, GradcheckArgs};
use crowdadapt_cli::CliError;

#[derive(Parser)]
#[command(
    name = "crowdadapt",
    version,
    about = "Scene-adaptive crowd density estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// `HxW` image size, e.g. `64x96`, both divisible by 8.
fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h
        .trim()
        .parse::<usize>()
        .map_err(|e| format!("bad height: {e}"))?;
    let w = w
        .trim()
        .parse::<usize>()
        .map_err(|e| format!("bad width: {e}"))?;
    Ok((h, w))
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic multi-scene dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        images_per_scene: usize,
        /// Image size as HxW (both divisible by 8).
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the guided model (or the plain batch-norm baseline).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run-config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path; the log lands beside it.
        #[arg(long)]
        out: PathBuf,
        /// Train the batch-normalization baseline instead.
        #[arg(long)]
        bn_baseline: bool,
    },
    /// Predict per-scene normalization parameters from unlabeled images.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene directory (one scene of a generated dataset).
        #[arg(long)]
        scene: PathBuf,
        /// Number of unlabeled images to average over.
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint on the held-out test scenes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Baseline checkpoint for a side-by-side delta section.
        #[arg(long)]
        baseline_ckpt: Option<PathBuf>,
        /// Output prefix for the JSON/TSV reports.
        #[arg(long, default_value = "eval_report")]
        out: PathBuf,
        /// Run-config JSON (for the dataset split); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train/evaluate across an ablation sweep and emit a TSV table.
    Report {
        /// Sweep grid: `scenes` (5,10,15,20) or `gbn-layers` (1,2,4,6).
        #[arg(long)]
        sweep: SweepKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            out,
            scenes,
            images_per_scene,
            size,
            seed,
        } => gen_data(&GenDataArgs {
            out,
            scenes,
            images_per_scene,
            height: size.0,
            width: size.1,
            seed,
        }),
        Command::Train {
            data,
            config,
            out,
            bn_baseline,
        } => train_model(&TrainArgs {
            data,
            config,
            out,
            bn_baseline,
        })
        .map(|_| ()),
        Command::Adapt {
            ckpt,
            scene,
            k,
            out,
            seed,
        } => adapt_scene(&AdaptArgs {
            ckpt,
            scene,
            k,
            out,
            seed,
        })
        .map(|_| ()),
        Command::Eval {
            ckpt,
            data,
            k,
            trials,
            seed,
            baseline_ckpt,
            out,
            config,
        } => eval_model(&EvalArgs {
            ckpt,
            data,
            k,
            trials,
            seed,
            baseline_ckpt,
            out,
            config,
        })
        .map(|_| ()),
        Command::Gradcheck { seed, tol } => {
            let report = run_gradcheck(&GradcheckArgs { seed, tol })?;
            print!("{}", report.table());
            println!(
                "max rel err {:.3e} (tol {:.1e})",
                report.max_rel_err(),
                report.tol
            );
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Verification(format!(
                    "gradient check failed: max rel err {:.3e} >= tol {:.1e}",
                    report.max_rel_err(),
                    report.tol
                )))
            }
        }
        Command::Report {
            sweep,
            data,
            config,
            out,
        } => {
            let tsv = run_sweep(&ReportArgs {
                sweep,
                data,
                config,
                out,
            })?;
            println!("sweep table at {}", tsv.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("crowdadapt: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
