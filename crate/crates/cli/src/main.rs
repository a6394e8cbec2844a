mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "tcvolterra", version, about = "Time-changed Volterra control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `ensemble.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `ensemble.paths`.
    #[arg(long, global = true)]
    paths: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate the noise and report conditional moments.
    Simulate,
    /// Solve the forward Volterra equation with all schemes.
    Forward,
    /// Estimate the NA-derivative, integral representation and duality.
    Naderiv,
    /// Solve a linear BSDE and report diagnostics.
    Bsde,
    /// Check the maximum principle for a declared candidate.
    CheckMp,
    /// Construct and check the harvesting candidate.
    Harvest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Forward => "forward",
            Command::Naderiv => "naderiv",
            Command::Bsde => "bsde",
            Command::CheckMp => "check-mp",
            Command::Harvest => "harvest",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| {
        let path = cli.config.clone().ok_or_else(|| CliError::Config("--config is required".into()))?;
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = config::parse(&text, &path).map_err(|e| CliError::Config(e.0))?;
        if let Some(seed) = cli.seed {
            cfg.ensemble.seed = seed;
        }
        if let Some(paths) = cli.paths {
            cfg.ensemble.paths = paths;
        }
        if let Some(out) = &cli.out {
            cfg.output.dir = out.clone();
        }
        cfg.validate().map_err(CliError::Config)?;
        commands::run(cli.command, &cfg, &text, cli.quiet)
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
