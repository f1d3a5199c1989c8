//! `divproj` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

mod commands;
pub mod config;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "divproj", version, about = "Factor estimation by diversified projections")]
pub struct Cli {
    /// JSON file with the same keys as the flags; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Estimate,
    Forecast,
    Infer,
    Cov,
    Spectest,
    Fdr,
    Simulate,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Estimate => "estimate",
            Self::Forecast => "forecast",
            Self::Infer => "infer",
            Self::Cov => "cov",
            Self::Spectest => "spectest",
            Self::Fdr => "fdr",
            Self::Simulate => "simulate",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Factors, loadings and residuals of a panel.
    Estimate(RunConfig),
    /// Rolling factor-augmented forecasts against a PC benchmark.
    Forecast(RunConfig),
    /// Factor-augmented post-selection inference on a treatment effect.
    Infer(RunConfig),
    /// Thresholded idiosyncratic covariance.
    Cov(RunConfig),
    /// Test whether observed factors span the latent factor space.
    Spectest(RunConfig),
    /// Factor-adjusted multiple testing of series means.
    Fdr(RunConfig),
    /// Monte Carlo experiments.
    Simulate(RunConfig),
}

impl Command {
    fn split(self) -> (CommandKind, RunConfig) {
        match self {
            Self::Estimate(c) => (CommandKind::Estimate, c),
            Self::Forecast(c) => (CommandKind::Forecast, c),
            Self::Infer(c) => (CommandKind::Infer, c),
            Self::Cov(c) => (CommandKind::Cov, c),
            Self::Spectest(c) => (CommandKind::Spectest, c),
            Self::Fdr(c) => (CommandKind::Fdr, c),
            Self::Simulate(c) => (CommandKind::Simulate, c),
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) => m,
        }
    }
}

impl From<divproj::Error> for CliError {
    fn from(e: divproj::Error) -> Self {
        match e {
            divproj::Error::InvalidParameter(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("divproj: {}", line.trim_start_matches("error: "));
            return 1;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("divproj: {}", e.message());
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (kind, flags) = cli.command.split();
    let mut cfg = match &cli.config {
        Some(path) => flags.overlay(RunConfig::load(path)?),
        None => flags,
    };
    let threads = cfg.resolve_threads()?;
    cfg.seed();
    // Ignore failure: a global pool may already exist when embedded in tests.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;

    let outputs = match kind {
        CommandKind::Estimate => commands::estimate(&mut cfg, &out)?,
        CommandKind::Forecast => commands::forecast(&mut cfg, &out)?,
        CommandKind::Infer => commands::infer(&mut cfg, &out)?,
        CommandKind::Cov => commands::cov(&mut cfg, &out)?,
        CommandKind::Spectest => commands::spectest(&mut cfg, &out)?,
        CommandKind::Fdr => commands::fdr(&mut cfg, &out)?,
        CommandKind::Simulate => commands::simulate(&mut cfg, &out)?,
    };
    write_manifest(kind, &cfg, &outputs, &out)
}

fn write_manifest(kind: CommandKind, cfg: &RunConfig, outputs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let files: Vec<String> = outputs
        .iter()
        .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned()))
        .collect();
    let manifest = json!({
        "tool": "divproj",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": kind.name(),
        "seed": cfg.seed,
        "config": cfg,
        "outputs": files,
    });
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}
