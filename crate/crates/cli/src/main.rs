//! `lfd`: run, resume and inspect Landau-Fermi-Dirac simulations.
//!
//! Exit status is 0 on success, 1 when the input is invalid (bad config,
//! missing or corrupt run files) and 2 when the computation itself fails or
//! `diagnose --assert` finds a violated threshold.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use lfd_core::run_io::{self, DiagnoseOptions, Status};

#[derive(Debug, Parser)]
#[command(name = "lfd", version, about = "Landau-Fermi-Dirac phase-space solver")]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, env = "LFD_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a simulation from a TOML configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to `output.directory` from the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate the kernel invariant suite and print it as JSON.
    CheckKernel {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute diagnostics from stored snapshots and check thresholds.
    Diagnose {
        #[arg(long)]
        output: PathBuf,
        /// Use this configuration instead of the one stored in the run.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Examine a single snapshot.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Also run the refinement ladders (several extra runs).
        #[arg(long)]
        ladders: bool,
        /// Exit nonzero when any threshold is violated.
        #[arg(long)]
        assert: bool,
    },
    /// Continue a run from its latest snapshot.
    Resume {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// A threshold violation reported by `diagnose --assert`.
#[derive(Debug)]
struct Violations(usize);

impl std::fmt::Display for Violations {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} criteria failed", self.0)
    }
}

impl std::error::Error for Violations {}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|e| lfd_core::Error::Config(format!("cannot read {}: {e}", path.display())).into())
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Run { config, output } => {
            let text = read_text(&config)?;
            let cfg = run_io::parse_config(&text)?;
            let dir = output.unwrap_or(cfg.output.directory);
            let summary = run_io::run(&text, &dir)?;
            print_json(&summary)
        }
        Command::CheckKernel { config } => {
            let cfg = run_io::parse_config(&read_text(&config)?)?;
            let report = run_io::check_kernel(&cfg)?;
            let failures = report.failures();
            let mut value = serde_json::to_value(&report)?;
            value["failures"] = serde_json::json!(failures);
            print_json(&value)?;
            if !failures.is_empty() {
                return Err(Violations(failures.len()).into());
            }
            Ok(())
        }
        Command::Diagnose {
            output,
            config,
            snapshot,
            ladders,
            assert,
        } => {
            let text = config.as_deref().map(read_text).transpose()?;
            let report = run_io::diagnose(&output, text.as_deref(), snapshot.as_deref(), DiagnoseOptions { ladders })?;
            for c in &report.criteria {
                let tag = match c.status {
                    Status::Pass => "PASS",
                    Status::Fail => "FAIL",
                    Status::Skipped => "SKIP",
                };
                eprintln!("[{tag}] {:>2} {}: {}", c.id, c.name, c.detail);
            }
            print_json(&report)?;
            let failed = report.failures().len();
            if assert && failed > 0 {
                return Err(Violations(failed).into());
            }
            Ok(())
        }
        Command::Resume { output, config } => {
            let text = config.as_deref().map(read_text).transpose()?;
            if !output.is_dir() {
                bail!(lfd_core::Error::Missing(format!("no run directory at {}", output.display())));
            }
            let summary = run_io::resume(&output, text.as_deref())?;
            print_json(&summary)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<lfd_core::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn validation_errors_map_to_one() {
        let e = anyhow!(lfd_core::Error::Config("x".into()));
        assert_eq!(exit_code(&e), 1);
        let e = anyhow!(lfd_core::Error::Missing("x".into()));
        assert_eq!(exit_code(&e), 1);
    }

    #[test]
    fn other_errors_map_to_two() {
        assert_eq!(exit_code(&anyhow!(Violations(3))), 2);
        assert_eq!(exit_code(&anyhow!("boom")), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
