//! `clickseg`: synthetic data, training, evaluation, click simulation and
//! the interactive server behind one binary.
//!
//! Exit codes: 0 success, 1 domain error (including skipped evaluation
//! samples), 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] clickseg::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0} sample(s) could not be evaluated")]
    Skipped(usize),

    #[error("server: {0}")]
    Serve(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "clickseg", version, about = "Click-based interactive segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand accepts.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// List the configuration keys and exit.
    #[arg(long)]
    pub list_keys: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shape dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model, writing per-epoch checkpoints and curve.jsonl.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// NoC evaluation of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated IoU thresholds.
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long)]
        click_cap: Option<usize>,
    },
    /// Dump simulated interactions, or replay a click log onto an image.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Only this sample id.
        #[arg(long)]
        id: Option<String>,
        /// Click log (JSON array of clicks, or an object with a `clicks` array).
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Image the replayed clicks refer to.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP session server.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn p(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { cfg, out, seed, count } => {
            commands::synth(&cfg, &[("out", p(&out)), ("seed", s(&seed)), ("count", s(&count))])
        }
        Command::Train { cfg, data, out, seed, resume } => commands::train(
            &cfg,
            &[("data", p(&data)), ("out", p(&out)), ("seed", s(&seed)), ("resume", p(&resume))],
        ),
        Command::Eval { cfg, checkpoint, data, out, thresholds, click_cap } => commands::eval(
            &cfg,
            &[
                ("checkpoint", p(&checkpoint)),
                ("data", p(&data)),
                ("out", p(&out)),
                ("thresholds", thresholds),
                ("click_cap", s(&click_cap)),
            ],
        ),
        Command::Simulate { cfg, checkpoint, data, id, replay, image, out } => commands::simulate(
            &cfg,
            &[
                ("checkpoint", p(&checkpoint)),
                ("data", p(&data)),
                ("id", id),
                ("replay", p(&replay)),
                ("image", p(&image)),
                ("out", p(&out)),
            ],
        ),
        Command::Serve { cfg, checkpoint, host, port } => commands::serve(
            &cfg,
            &[("checkpoint", p(&checkpoint)), ("host", host), ("port", s(&port))],
        ),
    }
}

fn subcommand_name(cli: &Cli) -> &'static str {
    match cli.command {
        Command::Synth { .. } => "synth",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Simulate { .. } => "simulate",
        Command::Serve { .. } => "serve",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints the synopsis and exits 2 on usage errors, 0 on --help
            e.exit();
        }
    };
    let name = subcommand_name(&cli);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let mut cmd = Cli::command();
            cmd.build();
            if let Some(sub) = cmd.find_subcommand_mut(name) {
                eprintln!("{}", sub.render_usage());
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
