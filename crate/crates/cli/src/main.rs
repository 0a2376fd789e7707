mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pdecalib::{Error, RunConfig};
use thiserror::Error as ThisError;

#[derive(Parser, Debug)]
#[command(name = "pdecalib", version, about = "Calibrate coefficient fields of 1D evolution PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the forward scheme with the exact field and write the trajectory.
    Simulate(CommonArgs),
    /// Fit the network field to generated snapshots.
    Calibrate(CommonArgs),
    /// Calibrate over a grid of (dt, h) values and several seeds.
    Sweep(CommonArgs),
    /// Calibrate, then write sensitivity regions of an anchored quantity.
    Sensitivity(CommonArgs),
    /// Calibrate with the network and with grid-value least squares.
    Baseline(CommonArgs),
    /// Evaluate the pointwise error bound for noiseless or noisy runs.
    VerifyBounds(CommonArgs),
    /// List the built-in presets, or print one as TOML.
    Presets {
        /// Preset to print.
        name: Option<String>,
    },
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// TOML configuration file, merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset used as the base configuration.
    #[arg(long)]
    preset: Option<String>,
    /// Problem kind: diffusion, wave or burgers.
    #[arg(long)]
    problem: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Seeds per sweep point.
    #[arg(long)]
    seeds: Option<usize>,
    /// Output root; each run writes into its own subdirectory.
    #[arg(long, env = "PDECALIB_OUT", default_value = "runs")]
    out: PathBuf,
    /// Dotted-key override such as `grid.n=640`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Use the full published resolution for presets that default to a
    /// reduced one.
    #[arg(long)]
    full_fidelity: bool,
}

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{context}: {source}")]
    Numerical { context: &'static str, source: Error },
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical { .. } => 3,
            CliError::Io(_) => 1,
        }
    }

    /// Classifies a library error raised in `context`.
    pub fn from_lib(context: &'static str, e: Error) -> Self {
        match e {
            Error::MissingKey(_)
            | Error::InvalidKey { .. }
            | Error::InvalidConfig(_)
            | Error::InvalidArchitecture(_)
            | Error::TimeNotOnLattice { .. }
            | Error::EmptySnapshots => CliError::Config(e.to_string()),
            other => CliError::Numerical { context, source: other },
        }
    }
}

pub fn config_err(e: Error) -> CliError {
    CliError::from_lib("configuration", e)
}

fn resolve(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let file_text = match &args.config {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let origin = args.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let mut overrides = args.set.clone();
    if let Some(p) = &args.problem {
        overrides.push(format!("problem=\"{p}\""));
    }
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(j) = args.jobs {
        overrides.push(format!("jobs={j}"));
    }
    if let Some(k) = args.seeds {
        overrides.push(format!("sweep.seeds={k}"));
    }
    let cfg = RunConfig::resolve(
        args.preset.as_deref(),
        args.full_fidelity,
        file_text.as_deref().map(|t| (origin.as_str(), t)),
        &overrides,
    )
    .map_err(config_err)?;
    cfg.problem_kind().map_err(config_err)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String, CliError> {
    let (name, args) = match &cli.command {
        Command::Presets { name } => return commands::presets(name.as_deref()),
        Command::Simulate(a) => ("simulate", a),
        Command::Calibrate(a) => ("calibrate", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Sensitivity(a) => ("sensitivity", a),
        Command::Baseline(a) => ("baseline", a),
        Command::VerifyBounds(a) => ("verify-bounds", a),
    };
    let cfg = resolve(args)?;
    let mut run = output::RunDir::create(&args.out, name, args.preset.as_deref(), &cfg)?;
    let summary = match name {
        "simulate" => commands::simulate(&cfg, &mut run)?,
        "calibrate" => commands::calibrate(&cfg, &mut run)?,
        "sweep" => commands::sweep(&cfg, &mut run)?,
        "sensitivity" => commands::sensitivity(&cfg, &mut run)?,
        "baseline" => commands::baseline(&cfg, &mut run)?,
        _ => commands::verify_bounds(&cfg, &mut run)?,
    };
    run.finish(&summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
