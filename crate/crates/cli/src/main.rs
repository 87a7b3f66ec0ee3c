use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dada_cli::commands::{self, deterministic_from_env, EvalArgs, GenDataArgs, Precision, TrainArgs};
use dada_cli::suite::{self, SuiteInputs, SuiteOptions, SuitePlan, FRACTION_SWEEP};
use dada_cli::{CliError, Result};
use dada_core::synthdata::Domain;
use dada_core::{AblationSetup, ModelConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "dada", version, about = "Depth-aware domain adaptation on synthetic street scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (RGB, labels, inverse depth) to a directory.
    GenData {
        /// Scene specification file; built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        domain: Domain,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one ablation setup.
    Train {
        #[arg(long)]
        model_cfg: Option<PathBuf>,
        #[arg(long)]
        train_cfg: Option<PathBuf>,
        #[arg(long, value_name = "S1..S7")]
        ablation: AblationSetup,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Labeled target-style split evaluated after the last iteration.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (and checkpoint) after this many iterations in total.
        #[arg(long)]
        stop_after: Option<u64>,
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report of a baseline on the same data, for the negative-transfer rate.
        #[arg(long)]
        baseline_report: Option<PathBuf>,
        /// Class indices for an additional subset mIoU.
        #[arg(long, value_delimiter = ',')]
        subset: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate setups over several seeds, then write the report.
    Ablate {
        #[arg(long)]
        model_cfg: Option<PathBuf>,
        #[arg(long)]
        train_cfg: Option<PathBuf>,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of seeds per setup.
        #[arg(long)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// Comma-separated presets; all seven by default.
        #[arg(long, value_delimiter = ',')]
        setups: Option<Vec<AblationSetup>>,
        /// Comma-separated source fractions for the sweep.
        #[arg(long, value_delimiter = ',', conflicts_with = "sweep")]
        fractions: Option<Vec<f64>>,
        /// Sweep source fractions 0.1, 0.3, 0.5, 0.7 and 1.0.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value = "S7")]
        fraction_setup: AblationSetup,
        #[arg(long)]
        deterministic: bool,
        /// Worker threads for concurrent cells; deterministic mode defaults to one.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
    /// Rebuild tables and plots of an ablation directory from its cells.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    match cli.command {
        Command::GenData {
            spec,
            domain,
            seed,
            count,
            out,
        } => {
            let m = commands::gen_data(&GenDataArgs {
                spec,
                domain,
                seed,
                count,
                out: out.clone(),
            })?;
            log::info!("wrote {} scenes to {}", m.len(), out.display());
        }
        Command::Train {
            model_cfg,
            train_cfg,
            ablation,
            source,
            target,
            val,
            out,
            resume,
            stop_after,
            deterministic,
            precision,
        } => {
            let s = commands::train(&TrainArgs {
                model_cfg,
                train_cfg,
                setup: ablation,
                source,
                target,
                val,
                out,
                resume,
                stop_after,
                deterministic: deterministic || deterministic_from_env(),
                precision,
                argv,
            })?;
            match s.report {
                Some(r) => println!("iteration {}: target mIoU {:.2}", s.iteration, 100.0 * r.miou),
                None => println!("iteration {}", s.iteration),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            baseline_report,
            subset,
            out,
        } => {
            let r = commands::eval(&EvalArgs {
                checkpoint,
                data,
                baseline_report,
                subset,
                out,
            })?;
            println!("mIoU {:.2}", 100.0 * r.miou);
        }
        Command::Ablate {
            model_cfg,
            train_cfg,
            source,
            target,
            val,
            out,
            seeds,
            first_seed,
            setups,
            fractions,
            sweep,
            fraction_setup,
            deterministic,
            jobs,
            precision,
        } => {
            let plan = SuitePlan {
                model: commands::load_or_default::<ModelConfig>(model_cfg.as_deref())?,
                train: commands::load_or_default::<TrainConfig>(train_cfg.as_deref())?,
                setups: setups.unwrap_or_else(AblationSetup::all_presets),
                seeds: (first_seed..first_seed + seeds).collect(),
                fractions: if sweep { FRACTION_SWEEP.to_vec() } else { fractions.unwrap_or_default() },
                fraction_setup,
                precision,
            };
            let opts = SuiteOptions {
                deterministic: deterministic || deterministic_from_env(),
                jobs,
                argv,
            };
            let summary = suite::run_suite(&plan, &SuiteInputs { source, target, val }, &out, &opts)?;
            print!("{}", suite::render_summary(&summary));
            if let Some(first) = summary.failed_cells.first() {
                return Err(CliError::Cells {
                    failed: summary.failed_cells.len(),
                    total: summary.cells.len(),
                    first: format!("{}: {}", first.name, first.message),
                    code: first.exit_code,
                });
            }
        }
        Command::Report { dir } => {
            let summary = suite::aggregate(&dir)?;
            print!("{}", suite::render_summary(&summary));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
