mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use knowtrace_core::evalkit::DatasetKind;
use tracing_subscriber::EnvFilter;

use crate::config::ConfigArgs;

#[derive(Debug, Parser)]
#[command(
    name = "knowtrace",
    version,
    about = "Iterative knowledge-graph retrieval-augmented reasoning"
)]
struct Cli {
    /// Log more (-v info, -vv debug). KNOWTRACE_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Hotpotqa,
    #[value(name = "2wiki")]
    TwoWiki,
    Musique,
}

impl From<KindArg> for DatasetKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Hotpotqa => DatasetKind::HotpotQa,
            KindArg::TwoWiki => DatasetKind::TwoWiki,
            KindArg::Musique => DatasetKind::Musique,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct DatasetArgs {
    /// Benchmark file (JSON array or JSONL).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long = "dataset-kind", value_enum, default_value = "hotpotqa")]
    dataset_kind: KindArg,
    /// Only the first N items.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
enum PromptModeArg {
    /// The exploration prompt exactly as the model saw it.
    #[default]
    Verbatim,
    /// The exploration prompt rebuilt from the supporting triplets only.
    Rerender,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a retrieval corpus and manifest from a benchmark file.
    Ingest {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one question and write its trajectory.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        question: String,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer every question of a dataset and evaluate the predictions.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Questions in flight at once.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Turn correct trajectories into supervision data.
    Backtrace {
        /// Directory of trajectory files.
        #[arg(long)]
        trajectories: PathBuf,
        /// JSON object mapping question id or text to gold answers.
        #[arg(long, conflicts_with = "dataset")]
        golds: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long = "dataset-kind", value_enum, default_value = "hotpotqa")]
        dataset_kind: KindArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "prompt-mode", value_enum, default_value = "verbatim")]
        prompt_mode: PromptModeArg,
        #[arg(long = "templates-dir")]
        templates_dir: Option<PathBuf>,
    },
    /// Run self-bootstrapping rounds.
    Bootstrap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        /// Write the first round's data and stop.
        #[arg(long = "emit-only", conflicts_with = "hook")]
        emit_only: bool,
        /// Training command, called with --base <id> --data <path> --round <k>.
        #[arg(long, required_unless_present = "emit_only")]
        hook: Option<String>,
        /// Extra leading argument for the hook (repeatable).
        #[arg(long = "hook-arg", allow_hyphen_values = true)]
        hook_args: Vec<String>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long = "prompt-mode", value_enum, default_value = "verbatim")]
        prompt_mode: PromptModeArg,
    },
    /// Score a directory of trajectories against a dataset.
    Eval {
        #[arg(long)]
        trajectories: PathBuf,
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-question cost and structure statistics of a run.
    Stats {
        /// Run directory (or its trajectories/ subdirectory).
        #[arg(long)]
        run: PathBuf,
        /// Corpus used for the run, to count retrieved passage tokens.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter =
        EnvFilter::try_from_env("KNOWTRACE_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::Ingest { data, out } => commands::ingest(&data, &out),
        Command::Infer {
            cfg,
            question,
            id,
            out,
        } => commands::infer(&cfg, &question, id.as_deref(), out),
        Command::Run {
            cfg,
            data,
            out,
            parallel,
        } => commands::run(&cfg, &data, out, parallel),
        Command::Backtrace {
            trajectories,
            golds,
            dataset,
            dataset_kind,
            out,
            prompt_mode,
            templates_dir,
        } => commands::backtrace(&commands::BacktraceArgs {
            trajectories,
            golds,
            dataset: dataset.map(|d| (d, dataset_kind.into())),
            out,
            prompt_mode,
            templates_dir,
        }),
        Command::Bootstrap {
            cfg,
            data,
            out,
            rounds,
            emit_only,
            hook,
            hook_args,
            parallel,
            prompt_mode,
        } => {
            let hook = match (emit_only, hook) {
                (true, _) | (false, None) => knowtrace_core::bootstrap::TrainHook::EmitOnly,
                (false, Some(program)) => knowtrace_core::bootstrap::TrainHook::Command {
                    program,
                    args: hook_args,
                },
            };
            commands::bootstrap(&cfg, &data, out, rounds, &hook, parallel, prompt_mode)
        }
        Command::Eval {
            trajectories,
            data,
            out,
        } => commands::eval(&trajectories, &data, &out),
        Command::Stats { run, corpus, json } => {
            commands::stats(&run, corpus.as_deref(), json.as_deref())
        }
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
