//! `aomd`: generate data, train, evaluate and inspect the meme classifier.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 I/O or data,
//! 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aomd_core::{Ablation, Error, Split};

#[derive(Parser, Debug)]
#[command(
    name = "aomd",
    version,
    about = "Analogy-aware offensive meme detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus dotted-key overrides.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration with `model`, `train` and `synthetic` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.optim.learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Manifest path; relative paths are resolved under $AOMD_DATA_DIR when
    /// it is set.
    #[arg(long)]
    pub data: PathBuf,
    /// Embedding table; defaults to the one named in the manifest header.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted-analogy synthetic corpus.
    GenSynthetic {
        /// JSON file holding the synthetic spec alone.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint, history and echoed config.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint; its model config wins.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split, or score a predictions file.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        data: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        /// JSON lines from `predict` (labels required) instead of a model.
        #[arg(long, conflicts_with_all = ["data", "checkpoint"])]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also write report.json and roc.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one JSON line per post with its score and attention weights.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to one split; all posts by default.
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test every model variant on the same split.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of variants.
        #[arg(long, value_delimiter = ',', value_parser = parse_ablation)]
        variants: Vec<Ablation>,
        /// Train the variants on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Group a JSON token list into phrase clusters.
    ClusterTokens {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fleiss' kappa over JSON-lines annotation records.
    Agreement {
        #[arg(long)]
        annotations: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown split {s:?} (train, val, test)"))
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Config(_)) => 2,
            Failure::Core(Error::Numeric { .. }) => 4,
            Failure::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => e.fmt(f),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynthetic {
            spec,
            overrides,
            out,
        } => commands::gen_synthetic(spec.as_deref(), &overrides, &out),
        Command::Train {
            data,
            config,
            out,
            resume,
        } => commands::train(&data, &config, &out, resume.as_deref()),
        Command::Eval {
            data,
            embeddings,
            checkpoint,
            split,
            predictions,
            threshold,
            out,
        } => match (predictions, data, checkpoint) {
            (Some(p), _, _) => commands::eval_predictions(&p, threshold, out.as_deref()),
            (None, Some(data), Some(ckpt)) => commands::eval_checkpoint(
                &DataArgs { data, embeddings },
                &ckpt,
                split,
                threshold,
                out.as_deref(),
            ),
            _ => Err(Failure::Usage(
                "eval needs --checkpoint with --data, or --predictions".into(),
            )),
        },
        Command::Predict {
            data,
            checkpoint,
            split,
            out,
        } => commands::predict(&data, &checkpoint, split, &out),
        Command::Ablate {
            data,
            config,
            out,
            variants,
            parallel,
        } => commands::ablate(&data, &config, &out, &variants, parallel),
        Command::ClusterTokens { input, out, config } => {
            commands::cluster_tokens(&input, &out, &config)
        }
        Command::Agreement { annotations } => commands::agreement(&annotations),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
