mod commands;
mod config;
mod failure;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "repsim", version, about = "CKA, stitching and model-distance experiments on residual networks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Flags override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config file for the subcommand
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: out)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// CKA reduction: standard or paper
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Rows per CKA batch, at least 4
    #[arg(long, global = true)]
    pub chunk: Option<usize>,
    /// Number of CKA batches
    #[arg(long, global = true)]
    pub batches: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Layer-by-layer CKA between two activation stores
    Cka(commands::cka::Flags),
    /// Stitch two checkpoints in all four directions
    Stitch(commands::stitch::Flags),
    /// Arccos-CKA product distances between stores
    Distances(commands::distances::Flags),
    /// Split a distance matrix into two clusters
    Cluster(commands::cluster::Flags),
    /// Segment a self-CKA matrix into contiguous blocks
    Blocks(commands::blocks::Flags),
    /// Train toy models and export their activations
    Toy(commands::toy::Flags),
    /// Render a CKA CSV as an SVG heatmap
    Heatmap(commands::heatmap::Flags),
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = cli.common;
    match cli.command {
        Command::Cka(f) => commands::cka::run(&common, f),
        Command::Stitch(f) => commands::stitch::run(&common, f),
        Command::Distances(f) => commands::distances::run(&common, f),
        Command::Cluster(f) => commands::cluster::run(&common, f),
        Command::Blocks(f) => commands::blocks::run(&common, f),
        Command::Toy(f) => commands::toy::run(&common, f),
        Command::Heatmap(f) => commands::heatmap::run(&common, f),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
