//! `nvp`: train, evaluate and explore real NVP flows.
//!
//! Exit codes: 0 success, 1 runtime failure (missing files, bad data),
//! 2 configuration error, 3 numerical divergence.

mod commands;
mod config;
mod grid;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nvp_core::{Error, Result};

use commands::Invocation;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "nvp", version, about = "Real NVP density estimation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (resumes when --checkpoint is given).
    Train(Args),
    /// Print validation bits/dim of a checkpoint.
    Eval(Args),
    /// Draw samples into a PNG grid (CSV for 2-D models).
    Sample(Args),
    /// Decode the latent manifold spanned by four validation images.
    Interpolate(Args),
    /// Keep coarse latents, resample the rest, decode.
    Compress(Args),
    /// Sample at a multiple of the training resolution.
    Extrapolate(Args),
    /// Re-decode images under shuffled attributes.
    AttrTransfer(Args),
    /// Write synthetic sprite or toy datasets.
    Generate(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Checkpoint to read (defaults to OUT/checkpoint.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Configuration overrides.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn invocation(args: Args, needs_config: bool) -> Result<Invocation> {
    let (mut cfg, base) = match &args.config {
        Some(path) => (
            RunConfig::from_file(path)?,
            path.parent().map(PathBuf::from).unwrap_or_default(),
        ),
        None if needs_config => return Err(Error::Config("--config is required".into())),
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    for pair in &args.overrides {
        cfg.apply_pair(pair)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(Invocation {
        cfg,
        base,
        out: args.out,
        checkpoint: args.checkpoint,
    })
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(a) => commands::train(&invocation(a, true)?),
        Command::Eval(a) => commands::eval(&invocation(a, true)?),
        Command::Sample(a) => commands::sample(&invocation(a, true)?),
        Command::Interpolate(a) => commands::interpolate_cmd(&invocation(a, true)?),
        Command::Compress(a) => commands::compress_cmd(&invocation(a, true)?),
        Command::Extrapolate(a) => commands::extrapolate_cmd(&invocation(a, true)?),
        Command::AttrTransfer(a) => commands::attr_transfer_cmd(&invocation(a, true)?),
        Command::Generate(a) => commands::generate(&invocation(a, false)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Divergence { .. } => 3,
                _ => 1,
            })
        }
    }
}
