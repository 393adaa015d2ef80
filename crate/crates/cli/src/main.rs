//! `congesta`: run scenarios, the periodic-strip counter-example and the
//! one-dimensional pipeline from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use congesta_core::scenario::{counterexample_report, counterexample_scenario, run_scenario, RunSummary, Scenario};
use congesta_core::Error;

#[derive(Parser)]
#[command(name = "congesta", version, about = "Packed particle media under adiabatic growth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write its CSV tables and summary.
    Run {
        scenario: PathBuf,
        /// Output directory, overriding `outputs.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated levels, overriding `levels.values`.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        /// Grid resolution as `NxN` (or a single `N`).
        #[arg(long)]
        resolution: Option<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Pointwise versus averaged continuity on the periodic strip.
    Counterexample {
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
    },
    /// Run a one-dimensional scenario and write `oned.csv`.
    Oned {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
}

fn parse_resolution(s: &str) -> Result<[usize; 2], Error> {
    let bad = || Error::Config(format!("invalid resolution: {s}"));
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let nums = parts.iter().map(|p| p.trim().parse::<usize>().map_err(|_| bad())).collect::<Result<Vec<_>, _>>()?;
    match nums.as_slice() {
        [n] => Ok([*n, *n]),
        [nx, ny] => Ok([*nx, *ny]),
        _ => Err(bad()),
    }
}

fn load(path: &Path, out: Option<PathBuf>) -> Result<Scenario, Error> {
    let mut s = Scenario::load(path)?;
    if let Some(dir) = out {
        s.outputs.dir = dir;
    }
    Ok(s)
}

fn report(summary: &RunSummary, quiet: bool) -> ExitCode {
    if !quiet {
        for step in &summary.steps {
            let u = step.u_n.map_or("-".to_string(), |u| format!("{u:.10}"));
            println!("t = {:<10} U_N = {u:<14} curves = {}", step.t, step.curves.len());
        }
        println!("{}: {}", summary.scenario, summary.status);
        for f in summary.failures() {
            println!("  FAIL {f}");
        }
    }
    ExitCode::from(summary.exit_code() as u8)
}

fn execute(s: &Scenario, quiet: bool) -> ExitCode {
    match run_scenario(s) {
        Ok(summary) => {
            if !quiet {
                println!("wrote {}", s.outputs.dir.display());
            }
            report(&summary, quiet)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 3 } else { 4 })
        }
    }
}

fn config_error(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(3)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, out, levels, resolution, quiet } => {
            let mut s = match load(&scenario, out) {
                Ok(s) => s,
                Err(e) => return config_error(e),
            };
            if let Some(levels) = levels {
                if let Err(e) = s.set_levels(levels) {
                    return config_error(e);
                }
            }
            if let Some(r) = resolution {
                if let Err(e) = parse_resolution(&r).and_then(|r| s.set_resolution(r)) {
                    return config_error(e);
                }
            }
            execute(&s, quiet)
        }
        Command::Oned { scenario, out, quiet } => {
            let s = match load(&scenario, out) {
                Ok(s) if s.dimension == 1 => s,
                Ok(_) => return config_error(Error::Config("oned needs a scenario with dimension = 1".into())),
                Err(e) => return config_error(e),
            };
            execute(&s, quiet)
        }
        Command::Counterexample { t, resolution } => {
            let s = match counterexample_scenario(t, resolution) {
                Ok(s) => s,
                Err(e) => return config_error(e),
            };
            match counterexample_report(&s, t) {
                Ok(r) => {
                    println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
                    ExitCode::from(if r.passed() { 0 } else { 2 })
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(if matches!(e, Error::Config(_)) { 3 } else { 4 })
                }
            }
        }
    }
}
