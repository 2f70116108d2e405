//! Scenario files, workflows and reports for the `rabsde` command.

use std::path::PathBuf;

pub mod file;
pub mod json;
pub mod report;
pub mod run;

pub use file::{load_scenario, parse_scenario, FieldError, ScenarioFile};
pub use run::{emit, run, Command, Format, Output, RunOptions};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: invalid scenario{}", path.display(), errors.iter().map(|e| format!("\n  {e}")).collect::<String>())]
    Invalid { path: PathBuf, errors: Vec<FieldError> },
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    /// 2 for bad input, 3 for a numerical failure, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 4,
            CliError::Invalid { .. } | CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

/// Run, emit and map the outcome to an exit code.
pub fn execute(opts: &RunOptions) -> Result<i32, CliError> {
    let output = run(opts)?;
    emit(&output, opts.format, opts.out.as_deref())?;
    Ok(output.exit_code())
}
