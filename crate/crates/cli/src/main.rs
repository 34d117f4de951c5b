use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lrf_cli::commands::{self, Format};
use lrf_cli::config::{parse_list, parse_range};
use lrf_cli::report::{render_compare, render_run_report};
use lrf_cli::{CliError, RunConfig};
use lrf_core::trajectory::RetrainMode;

#[derive(Parser)]
#[command(name = "lrf", version, about = "Iterative low-rank compression with rank search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference baseline and write its checkpoint.
    Bake(Common),
    /// Search, compress and retrain along a speedup trajectory.
    RunTrajectory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Apply a scheme file to a baseline and retrain it.
    Apply {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scheme: PathBuf,
    },
    /// Iterative vs one-shot comparison with reward histograms.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the FLOPS breakdown of a checkpoint.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FormatArg {
    Text,
    Structured,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Compressed,
    Cyclic,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated speedup targets, e.g. 1.5,2,3.
    #[arg(long)]
    trajectory: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    /// Initial energy range as lo,hi.
    #[arg(long)]
    energy_range: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format for text printed to standard output.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.trajectory {
            cfg.trajectory = parse_list(v)?;
        }
        if let Some(v) = self.budget {
            cfg.budget = v;
        }
        if let Some(v) = &self.energy_range {
            cfg.energy_range = parse_range(v)?;
        }
        if let Some(v) = self.episodes {
            cfg.episodes = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Compressed => RetrainMode::Compressed,
                ModeArg::Cyclic => RetrainMode::Cyclic,
            };
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        Ok(cfg)
    }

    fn structured(&self) -> bool {
        matches!(self.format, Some(FormatArg::Structured))
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Bake(common) => {
            let m = commands::cmd_bake(&common.resolve()?)?;
            Ok(if common.structured() {
                serde_json::to_string_pretty(&m)?
            } else {
                format!("baseline error {:.4} (train {:.4})", m.baseline_error, m.train_error)
            })
        }
        Command::RunTrajectory { common, checkpoint } => {
            let r = commands::cmd_run_trajectory(&common.resolve()?, &checkpoint)?;
            Ok(if common.structured() {
                serde_json::to_string_pretty(&r)?
            } else {
                render_run_report(&r)
            })
        }
        Command::Apply {
            common,
            checkpoint,
            scheme,
        } => {
            let r = commands::cmd_apply(&common.resolve()?, &checkpoint, &scheme)?;
            Ok(if common.structured() {
                serde_json::to_string_pretty(&r)?
            } else {
                render_run_report(&r)
            })
        }
        Command::Compare { common, checkpoint } => {
            let r = commands::cmd_compare(&common.resolve()?, &checkpoint)?;
            Ok(if common.structured() {
                serde_json::to_string_pretty(&r)?
            } else {
                render_compare(&r)
            })
        }
        Command::Report { checkpoint, format } => {
            let f = match format {
                FormatArg::Text => Format::Text,
                FormatArg::Structured => Format::Structured,
            };
            commands::cmd_report(&checkpoint, f)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            println!("{}", text.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
