//! `iclc`: compile RAW programs to transformer weights, verify them, and run
//! metric and probe experiments from JSON configs.
//!
//! Exit codes: 0 success, 1 runtime or tolerance failure, 2 config error,
//! 3 compile error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "iclc", version, about = "Compile RAW programs to transformer weights and compare in-context learners")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Flags override the config file, which
/// overrides built-in defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// JSON config (for `compile`: a RAW program or a library program spec).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file; a `.meta.json` sidecar is written next to CSV outputs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Relative error tolerance for `verify`.
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compile a program JSON into transformer parameters.
    Compile,
    /// Compare a compiled program with its closed-form reference.
    Verify(VerifyArgs),
    /// SPD, ILWD, MSPD, R² and Bayes-risk sweeps, written as CSV.
    Metrics,
    /// Train position-attention probes on compiled-model traces.
    Probe,
}

#[derive(Args, Debug, Clone, Default)]
pub struct VerifyArgs {
    /// Library program: sgd_step, sgd_multi_step or sherman_morrison.
    #[arg(long)]
    pub program: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Context examples for sgd_multi_step.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Run these parameters instead of compiling the program.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(w) = cli.global.workers {
        if w == 0 {
            eprintln!("error: --workers must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Compile => commands::compile(&cli.global),
        Command::Verify(args) => commands::verify(&cli.global, args),
        Command::Metrics => commands::metrics(&cli.global),
        Command::Probe => commands::probe(&cli.global),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
