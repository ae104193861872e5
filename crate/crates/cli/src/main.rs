use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stbl_cli::report::{initial_assumptions, TheoreticalBounds};
use stbl_cli::{load_config, replay_file, run, trajectories_path, CliError, Overrides, EXIT_CONFIG, EXIT_MISMATCH};

/// Over-collateralized stablecoin simulator.
#[derive(Parser)]
#[command(name = "stbl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of paths, overriding the file.
    #[arg(long)]
    paths: Option<usize>,
    /// Steps per path, overriding the file.
    #[arg(long)]
    horizon: Option<usize>,
    /// Output directory, overriding the file.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            paths: self.paths,
            horizon: self.horizon,
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the ensemble and write trajectories, plot data and the report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Exit with status 2 if any bound is violated.
        #[arg(long)]
        strict: bool,
    },
    /// Re-derive a trajectory table from the configuration and report mismatches.
    Replay {
        #[command(flatten)]
        common: Common,
        /// Trajectory table; defaults to the one in the output directory.
        table: Option<PathBuf>,
        /// Another table whose price column must match this one.
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Evaluate the standing assumptions at the initial state.
    CheckAssumptions {
        #[command(flatten)]
        common: Common,
    },
    /// Print the theoretical tail and expected-maximum bounds.
    Bounds {
        #[command(flatten)]
        common: Common,
    },
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run { common, strict } => {
            let cfg = load_config(&common.config, &common.overrides())?;
            let outcome = run(&cfg, strict)?;
            let r = &outcome.report;
            eprintln!(
                "wrote {} paths x {} steps to {} (seed {}, config {})",
                r.n_paths,
                r.horizon,
                cfg.out.display(),
                r.seed,
                &r.config_sha256[..12]
            );
            if outcome.exit != 0 {
                eprintln!("a bound was violated");
            }
            Ok(outcome.exit)
        }
        Command::Replay { common, table, against } => {
            let cfg = load_config(&common.config, &common.overrides())?;
            let table = table.unwrap_or_else(|| trajectories_path(&cfg));
            let outcome = replay_file(&cfg, &table, against.as_deref())?;
            print_json(&outcome);
            if outcome.passed() {
                Ok(0)
            } else {
                if let Some(m) = outcome.summary.mismatches.first() {
                    eprintln!("mismatch at row {} (path {}, t {}): {}", m.row, m.path, m.t, m.field);
                }
                Ok(EXIT_MISMATCH)
            }
        }
        Command::CheckAssumptions { common } => {
            let cfg = load_config(&common.config, &common.overrides())?;
            print_json(&initial_assumptions(&cfg)?);
            Ok(0)
        }
        Command::Bounds { common } => {
            let cfg = load_config(&common.config, &common.overrides())?;
            print_json(&TheoreticalBounds::new(&cfg));
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG as u8)
        }
    }
}
