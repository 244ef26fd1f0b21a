//! `flor` command-line experiments: base training, episodic evaluation,
//! landscape probes and synthetic data export.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_eval, cmd_probe, cmd_synth, cmd_train, ProbeKind};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "flor", version, about = "Few-shot experiments with mixed normalization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set protocol.k=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the base split and write a checkpoint.
    Train(ConfigArgs),
    /// Episodic evaluation of a checkpoint on the novel split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to `<output_dir>/checkpoint.flor`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the CSV behind one landscape probe.
    Probe {
        #[arg(value_enum)]
        kind: ProbeKind,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export the synthetic benchmark as class-per-directory PNG folders.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Execute one command; returns the text to print on stdout.
pub fn run(cli: Cli) -> Result<String> {
    Ok(match cli.command {
        Command::Train(c) => format!("checkpoint: {}", cmd_train(&c.load()?)?.display()),
        Command::Eval { config, checkpoint } => cmd_eval(&config.load()?, checkpoint.as_deref())?.1,
        Command::Probe { kind, config, checkpoint } => cmd_probe(&config.load()?, kind, checkpoint.as_deref())?.display().to_string(),
        Command::Synth { config, out } => {
            cmd_synth(&config.load()?, &out)?;
            out.display().to_string()
        }
    })
}
