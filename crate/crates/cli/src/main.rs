use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rabsde_cli::{execute, Command, Format, RunOptions};

#[derive(Parser)]
#[command(name = "rabsde", version, about = "Solve and check reflected anticipated BSDEs with default on a lattice")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    args: Args,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Backward induction, validation and optional oracle cross-check.
    Solve,
    /// Picard iteration against the backward solution.
    Picard,
    /// Optimal stopping checks.
    Stopping,
    /// Comparison of two scenarios.
    Compare,
    /// Randomized comparison and validation cases.
    Suite,
}

#[derive(ValueEnum, Clone, Copy)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(ValueEnum, Clone, Copy, PartialEq)]
enum OracleArg {
    Crr,
    None,
}

#[derive(clap::Args)]
struct Args {
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    #[arg(long, global = true)]
    scenario2: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json", global = true)]
    format: FormatArg,
    /// Tolerance for the reported checks (and the Picard stopping rule).
    #[arg(long, default_value_t = 1e-10, global = true)]
    tol: f64,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "none", global = true)]
    oracle: OracleArg,
    /// Generated cases for `suite`.
    #[arg(long, default_value_t = 200, global = true)]
    cases: usize,
    /// Add wall-clock timings to the report.
    #[arg(long, global = true)]
    timing: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("RABSDE_THREADS") {
        let threads = match v.parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: RABSDE_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let command = match cli.command {
        Cmd::Solve => Command::Solve,
        Cmd::Picard => Command::Picard,
        Cmd::Stopping => Command::Stopping,
        Cmd::Compare => Command::Compare,
        Cmd::Suite => Command::Suite,
    };
    let a = cli.args;
    let opts = RunOptions {
        scenario: a.scenario,
        scenario2: a.scenario2,
        out: a.out,
        format: match a.format {
            FormatArg::Json => Format::Json,
            FormatArg::Csv => Format::Csv,
        },
        tol: a.tol,
        seed: a.seed,
        crr: a.oracle == OracleArg::Crr,
        timing: a.timing,
        cases: a.cases,
        ..RunOptions::new(command)
    };
    match execute(&opts) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
