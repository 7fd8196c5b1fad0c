//! `streamkit` — launch stream-processing runs described by a TOML config.
//!
//! `run --config PATH [--mode inprocess|sockets]` starts every rank and
//! prints the per-rank metrics table plus the aggregate processing rates.
//! In sockets mode the binary re-executes itself per rank via the
//! internal `self` subcommand.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use streamkit::harness;
use streamkit::launcher::{launch, parse_config, run_child_rank, LaunchMode};

#[derive(Parser)]
#[command(name = "streamkit", version, about = "Producer/consumer group stream runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Inprocess,
    Sockets,
}

impl From<ModeArg> for LaunchMode {
    fn from(m: ModeArg) -> LaunchMode {
        match m {
            ModeArg::Inprocess => LaunchMode::InProcess,
            ModeArg::Sockets => LaunchMode::Sockets,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Launch a run from a config document.
    Run {
        /// Path to the TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's transport mode.
        #[arg(long)]
        mode: Option<ModeArg>,
    },
    /// Internal: execute one rank of a sockets-mode run.
    #[command(name = "self", hide = true)]
    SelfRank {
        #[arg(long)]
        rank: u32,
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, mode } => run_command(config, mode),
        Command::SelfRank { rank, config } => match run_child_rank(rank, &config) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("rank {rank} failed: {e}");
                ExitCode::FAILURE
            }
        },
    }
}

fn run_command(config_path: PathBuf, mode: Option<ModeArg>) -> ExitCode {
    let text = match std::fs::read_to_string(&config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", config_path.display());
            return ExitCode::FAILURE;
        }
    };
    let mut config = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::FAILURE;
        }
    };
    if let Some(mode) = mode {
        if let Err(e) = config.set_mode(mode.into()) {
            eprintln!("{e}");
            return ExitCode::FAILURE;
        }
    }
    let exe = std::env::current_exe().ok();
    let report = match launch(&config, Some(&config_path), exe.as_deref()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("launch failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    print!("{}", harness::render_table(&report.report));
    println!("metrics written to {}", config.out_dir.join("metrics.csv").display());
    if report.success() {
        ExitCode::SUCCESS
    } else {
        for line in report.diagnostics() {
            eprintln!("FAILED: {line}");
        }
        ExitCode::FAILURE
    }
}
