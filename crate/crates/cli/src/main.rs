//! `eopd`: toy instability lab, distillation training, sweeps and analysis.

mod commands;
mod config;
mod error;
mod manifest;
mod staging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{Analysis, AnalyzeArgs};
use crate::config::{Loaded, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "eopd",
    version,
    about = "Entropy-aware on-policy distillation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Key-value config file, or a manifest written by an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Overrides the toy seed list and the training/environment seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Two-scenario toy experiment on top-1 / top-10 instability.
    Toy(Common),
    /// Train one student with the configured method.
    Train(Common),
    /// Train once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// tau, k, variant or fkl_fraction.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Diagnostics over a saved student, the teacher, or a saved buffer.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        analysis: Option<Analysis>,
        /// Student checkpoint written by `train`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Trajectory JSONL written by `train`.
        #[arg(long)]
        buffer: Option<PathBuf>,
    },
}

fn load(common: &Common, command: &str) -> Result<Loaded, CliError> {
    let mut loaded = match &common.config {
        Some(path) => config::load(path)?,
        None => Loaded {
            config: RunConfig::default(),
            manifest: None,
        },
    };
    if let Some(m) = &loaded.manifest {
        if m.command != command {
            return Err(CliError::Usage(format!(
                "manifest was written by '{}', not '{command}'",
                m.command
            )));
        }
    }
    if let Some(seed) = common.seed {
        loaded.config.override_seed(seed);
        loaded.config.validate().map_err(CliError::Usage)?;
    }
    Ok(loaded)
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    match cli.command {
        Command::Toy(common) => {
            let loaded = load(&common, "toy")?;
            commands::toy(&loaded.config, &common.out)
        }
        Command::Train(common) => {
            let loaded = load(&common, "train")?;
            commands::train(&loaded.config, &common.out)
        }
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let loaded = load(&common, "sweep")?;
            let m = loaded.manifest.as_ref();
            let axis = axis
                .or_else(|| m.and_then(|m| m.axis.clone()))
                .ok_or_else(|| CliError::Usage("sweep needs --axis".into()))?;
            let values = if values.is_empty() {
                m.map(|m| m.values.clone()).unwrap_or_default()
            } else {
                values
            };
            commands::sweep_cmd(&loaded.config, &axis, &values, &common.out)
        }
        Command::Analyze {
            common,
            analysis,
            model,
            buffer,
        } => {
            let loaded = load(&common, "analyze")?;
            let m = loaded.manifest.as_ref();
            let analysis = match analysis {
                Some(a) => a,
                None => match m.and_then(|m| m.analysis.as_deref()) {
                    Some(name) => <Analysis as clap::ValueEnum>::from_str(name, false)
                        .map_err(CliError::Usage)?,
                    None => return Err(CliError::Usage("analyze needs --analysis".into())),
                },
            };
            let model = model.or_else(|| m.and_then(|m| m.model.as_ref().map(PathBuf::from)));
            let buffer = buffer.or_else(|| m.and_then(|m| m.buffer.as_ref().map(PathBuf::from)));
            let args = AnalyzeArgs {
                analysis,
                model: model.as_deref(),
                buffer: buffer.as_deref(),
            };
            commands::analyze(&loaded.config, &args, &common.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EOPD_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(files) => {
            for f in &files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
