use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use refgame::checkpoint::checkpoint_dir;
use refgame::trainer::{read_metrics_log, write_outcomes, write_report, METRICS_LOG};
use refgame::ExperimentConfig;
use refgame_cli::matrix::{default_runner, run_matrix, ExperimentMatrix, RowStatus};
use refgame_cli::plot::{emit_plots, LabelledLog};
use refgame_cli::{eval_checkpoint, inspect_checkpoint, write_message_report};

#[derive(Parser)]
#[command(name = "refgame", version, about = "Train and analyse referential signalling games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment, then evaluate it on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: runs/<config hash>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset location (overrides data.path and REFGAME_DATA).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        games: Option<usize>,
        /// Argmax decoding instead of sampling (analysis only).
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report file (default: printed only).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump per-game outcomes as JSON lines.
        #[arg(long)]
        dump_outcomes: Option<PathBuf>,
    },
    /// Run every row of an experiment matrix and write the combined tables.
    Matrix {
        /// Matrix file; without it the paper's eleven rows are built from --config.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Base config for the paper matrix.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// Rerun rows that already have a report.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the matrix file that would run, and stop.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    /// Plot training curves from one or more run directories or metrics logs.
    Plot {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump messages and token/class statistics for a checkpoint.
    InspectMessages {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        games: usize,
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> refgame::Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            resume,
            seed,
            out,
            data,
            epochs,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            if data.is_some() {
                cfg.data.path = data;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let summary = refgame::trainer::train(&cfg, resume.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&summary.report)?);
            println!("final checkpoint: {}", checkpoint_dir(&summary.output_dir, cfg.epochs).display());
        }
        Command::Eval {
            ckpt,
            games,
            greedy,
            data,
            out,
            dump_outcomes,
        } => {
            let (report, outcomes) = eval_checkpoint(&ckpt, games, greedy, data.as_deref())?;
            if let Some(path) = out {
                write_report(&path, &report)?;
            }
            if let Some(path) = dump_outcomes {
                write_outcomes(&path, &outcomes)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Matrix {
            matrix,
            config,
            out,
            parallelism,
            force,
            seed,
            emit,
        } => {
            let mut m = match (matrix, config) {
                (Some(path), None) => ExperimentMatrix::load(&path)?,
                (None, Some(base)) => ExperimentMatrix::paper(&ExperimentConfig::load(&base)?),
                _ => {
                    return Err(refgame::Error::Config(
                        "give exactly one of --matrix or --config".into(),
                    ))
                }
            };
            if let Some(s) = seed {
                for row in &mut m.rows {
                    row.config.seed = s;
                }
            }
            if let Some(path) = emit {
                m.validate()?;
                std::fs::write(&path, m.to_toml_string()?)?;
                println!("wrote {}", path.display());
                return Ok(ExitCode::SUCCESS);
            }
            let outcome = run_matrix(&m, &out, parallelism, force, default_runner)?;
            print!("{}", std::fs::read_to_string(&outcome.table_text)?);
            for r in &outcome.results {
                if let RowStatus::Failed(e) = &r.status {
                    eprintln!("row {} failed: {e}", r.row.name);
                }
            }
            if outcome.failures() > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Plot { logs, out } => {
            let mut labelled = Vec::new();
            for path in logs {
                let file = if path.is_dir() { path.join(METRICS_LOG) } else { path.clone() };
                let label = if path.is_dir() {
                    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
                } else {
                    path.display().to_string()
                };
                labelled.push(LabelledLog {
                    label,
                    records: read_metrics_log(&file)?,
                });
            }
            for p in emit_plots(&labelled, &out)? {
                println!("{}", p.display());
            }
        }
        Command::InspectMessages {
            ckpt,
            games,
            greedy,
            data,
            out,
        } => {
            let report = inspect_checkpoint(&ckpt, games, greedy, data.as_deref())?;
            let (records, summary) = write_message_report(&report, &out)?;
            println!(
                "{} games, comm rate {:.3}, token/class MI {:.4} nats (corrected {:.4}), {} distinct messages, hash-like: {}",
                report.games,
                report.comm_rate,
                report.mutual_information,
                report.mutual_information_corrected,
                report.distinct_messages,
                report.hash_like
            );
            println!("{}\n{}", records.display(), summary.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
