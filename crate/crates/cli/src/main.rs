//! `thermosleep synth|fit|margins|project|plot --config <file> --seed <n> --out <dir>`
//!
//! Exit status: 0 on success, 1 for invalid input or configuration, 2 when the
//! estimation itself fails numerically.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use log::error;

use config::RunConfig;
use manifest::{Manifest, OutDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    /// Generate a synthetic world with a known dose response.
    Synth,
    /// Ingest, link weather, build the design and fit it.
    Fit,
    /// Fit an interacted model and report per-category slopes.
    Margins,
    /// Project annual sleep loss on scenario temperature grids.
    Project,
    /// Render a curve or loss map as SVG.
    Plot,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Fit => "fit",
            Command::Margins => "margins",
            Command::Project => "project",
            Command::Plot => "plot",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "thermosleep", version, about = "Nighttime temperature and sleep pipeline")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration, or a `manifest.json` from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Seed for all randomness; overrides the config and manifest.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

/// Load the config, or the embedded config of a manifest after checking its
/// inputs are unchanged. Returns the config and the recorded seed, if any.
fn load(cli: &Cli) -> Result<(RunConfig, Option<u64>)> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| thermosleep::Error::Validation(format!("cannot read {}: {e}", cli.config.display())))?;
    if Manifest::sniff(&text) {
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| thermosleep::Error::Validation(format!("{}: {e}", cli.config.display())))?;
        if m.subcommand != cli.command.name() {
            return Err(thermosleep::Error::Validation(format!(
                "manifest records a `{}` run, not `{}`",
                m.subcommand,
                cli.command.name()
            ))
            .into());
        }
        m.verify_inputs()?;
        return Ok((m.config, Some(m.seed)));
    }
    let mut cfg = RunConfig::from_toml(&text, &cli.config)?;
    let base = cli.config.parent().unwrap_or(Path::new("."));
    let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
    let base = base
        .canonicalize()
        .with_context(|| format!("resolving {}", base.display()))?;
    cfg.resolve_paths(&base);
    let seed = cfg.seed;
    Ok((cfg, seed))
}

fn run(cli: &Cli) -> Result<()> {
    let (cfg, recorded_seed) = load(cli)?;
    cfg.validate()?;
    let seed = cli.seed.or(recorded_seed).unwrap_or(0);
    let mut out = OutDir::create(&cli.out)?;
    let mut manifest = Manifest::new(cli.command.name(), seed, &cfg);
    match cli.command {
        Command::Synth => commands::synth(&cfg, seed, &mut out)?,
        Command::Fit => commands::run_fit(&cfg, &mut out, &mut manifest)?,
        Command::Margins => commands::run_margins(&cfg, &mut out, &mut manifest)?,
        Command::Project => commands::run_project(&cfg, &mut out, &mut manifest)?,
        Command::Plot => commands::run_plot(&cfg, &mut out, &mut manifest)?,
    }
    out.finish(manifest)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<thermosleep::Error>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with 2 on usage errors; keep 2 for numerical failures
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
