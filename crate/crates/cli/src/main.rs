//! `fastmem` — command-line driver for prompt memorization experiments.
//!
//! The lifecycle is: `make-dataset` → `pretrain` → `instruct-tune`, after
//! which `memorize`, `generate`, `eval`, `sweep`, and `profile` operate on
//! the artifacts in the shared output directory.
//!
//! Exit codes: 0 success, 2 usage error, 3 missing artifact, 4 numerical
//! divergence.

mod artifacts;
mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use commands::{EvalSet, Strategy, SweepAxis};
use config::Style;
use fastmem_core::memtrack::{self, CountingAllocator};
use std::path::PathBuf;

#[global_allocator]
static ALLOCATOR: CountingAllocator = CountingAllocator::new();

#[derive(Debug, Parser)]
#[command(
    name = "fastmem",
    version,
    about = "Inference-time prompt memorization on a toy transformer",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file with sections model / memorize / decode / eval.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config field by dotted path, e.g. memorize.lambda=0.3.
    #[arg(long = "override", value_name = "PATH=VALUE")]
    overrides: Vec<String>,

    /// Random seed for anything stochastic in this command.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Output (and artifact) directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Shorthand for decode.alpha.
    #[arg(long, value_name = "F")]
    alpha: Option<f64>,

    /// Shorthand for memorize.lambda.
    #[arg(long, value_name = "F")]
    lambda: Option<f64>,

    /// Shorthand for memorize.epochs.
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,

    /// Shorthand for memorize.adapted_blocks.
    #[arg(long, value_name = "N")]
    blocks: Option<usize>,

    /// Shorthand for memorize.batch (prompts memorized per session).
    #[arg(long, value_name = "N")]
    batch: Option<usize>,
}

impl Common {
    /// Resolves the layered configuration: file, then --override paths,
    /// then the shorthand flags.
    fn resolve(&self) -> anyhow::Result<(config::AppConfig, serde_json::Value)> {
        let mut sets = self.overrides.clone();
        if let Some(v) = self.alpha {
            sets.push(format!("decode.alpha={v}"));
        }
        if let Some(v) = self.lambda {
            sets.push(format!("memorize.lambda={v}"));
        }
        if let Some(v) = self.epochs {
            sets.push(format!("memorize.epochs={v}"));
        }
        if let Some(v) = self.blocks {
            sets.push(format!("memorize.adapted_blocks={v}"));
        }
        if let Some(v) = self.batch {
            sets.push(format!("memorize.batch={v}"));
        }
        // Configuration problems are usage errors.
        config::resolve(self.config.as_deref(), &sets)
            .map_err(|e| fastmem_core::Error::invalid(format!("{e:#}")).into())
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic facts corpus, QA sets, and tokenizer.
    MakeDataset {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain a model on the generated document stream.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Instruction-tune the pretrained checkpoint on supervised QA.
    InstructTune {
        #[command(flatten)]
        common: Common,
    },
    /// Adapt the last FFN module to one text and report perplexity.
    Memorize {
        #[command(flatten)]
        common: Common,
        /// Text to memorize.
        #[arg(long, group = "source")]
        text: Option<String>,
        /// File whose contents are memorized.
        #[arg(long, group = "source", value_name = "PATH")]
        file: Option<PathBuf>,
        /// Prompt style for the memorization text.
        #[arg(long, value_enum)]
        style: Option<Style>,
    },
    /// Answer one question with a chosen strategy.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Reference text supplied as context.
        #[arg(long)]
        text: String,
        /// Question to answer.
        #[arg(long)]
        question: String,
        #[arg(long, value_enum, default_value = "baseline")]
        strategy: Strategy,
    },
    /// Score a strategy on one evaluation set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        strategy: Strategy,
        /// Evaluation set to score.
        #[arg(long, value_enum)]
        set: EvalSet,
    },
    /// Vary one axis and record accuracy and memorized-text perplexity.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated axis values; defaults to the standard grid.
        #[arg(long, value_name = "CSV")]
        values: Option<String>,
    },
    /// Report wall time and peak memory for memorization, prefill, decode.
    Profile {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::MakeDataset { common }
            | Command::Pretrain { common }
            | Command::InstructTune { common }
            | Command::Memorize { common, .. }
            | Command::Generate { common, .. }
            | Command::Eval { common, .. }
            | Command::Sweep { common, .. }
            | Command::Profile { common } => common,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = cli.command.common();
    let (mut app, snapshot) = common.resolve()?;
    let seed = common.seed;
    let out = common.out.clone();

    match cli.command {
        Command::MakeDataset { .. } => commands::make_dataset(&app, snapshot, seed, &out),
        Command::Pretrain { .. } => commands::cmd_pretrain(&app, snapshot, seed, &out),
        Command::InstructTune { .. } => commands::cmd_instruct_tune(&app, snapshot, seed, &out),
        Command::Memorize { text, file, style, .. } => {
            if let Some(style) = style {
                app.memorize.style = style;
            }
            let text = match (text, file) {
                (Some(t), None) => t,
                (None, Some(path)) => std::fs::read_to_string(&path).map_err(|_| {
                    anyhow::Error::from(artifacts::MissingArtifact(path))
                })?,
                _ => {
                    return Err(fastmem_core::Error::invalid(
                        "exactly one of --text or --file is required",
                    )
                    .into())
                }
            };
            commands::cmd_memorize(&app, snapshot, seed, &out, &text)
        }
        Command::Generate { text, question, strategy, .. } => {
            commands::cmd_generate(&app, snapshot, seed, &out, strategy, &text, &question)
        }
        Command::Eval { strategy, set, .. } => {
            commands::cmd_eval(&app, snapshot, seed, &out, strategy, set)
        }
        Command::Sweep { axis, values, .. } => {
            commands::cmd_sweep(&app, snapshot, seed, &out, axis, values.as_deref())
        }
        Command::Profile { .. } => commands::cmd_profile(&app, snapshot, seed, &out),
    }
}

fn main() {
    memtrack::mark_installed();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(commands::exit_code(&err));
    }
}
