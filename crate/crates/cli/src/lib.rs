//! Command-line front end: configuration, reproducible ensemble runs,
//! artifact emission and replay verification.
//!
//! Each command returns the process exit status: 0 on success, 1 for usage
//! or configuration errors, 2 when a bound is violated in strict mode and 3
//! when a replay finds a mismatch.

// Negated comparisons are how NaN inputs are rejected throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod config;
pub mod error;
pub mod replay;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use stbl_core::analysis::StopRule;
use stbl_core::dynamics::simulate_ensemble;

use crate::artifacts::{Provenance, CONFIG, DEVIATION, FAN, REPORT, TRAJECTORIES};
pub use crate::config::{parse_config, RunConfig};
pub use crate::error::CliError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub horizon: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Reads, overrides and validates a configuration file.
pub fn load_config(path: &Path, ov: &Overrides) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(n) = ov.paths {
        cfg.paths = n;
    }
    if let Some(h) = ov.horizon {
        cfg.horizon = h;
    }
    if let Some(o) = &ov.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(CliError::io(format!("writing {}", path.display())))
}

/// Outcome of a run, for callers that want more than the exit status.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: report::Report,
    pub exit: i32,
}

/// Simulates the ensemble and writes every enabled artifact to `cfg.out`.
pub fn run(cfg: &RunConfig, strict: bool) -> Result<RunOutcome, CliError> {
    let digest = cfg.digest();
    let prov = Provenance {
        seed: cfg.seed,
        config_sha256: digest.clone(),
    };
    let s0 = cfg.initial.state(&cfg.params)?;
    let ensemble = simulate_ensemble(
        &s0,
        &cfg.returns,
        &cfg.params,
        cfg.horizon,
        &cfg.detectors,
        cfg.seed,
        cfg.paths,
    )?;
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(CliError::io(format!("creating {}", out.display())))?;
    write_text(&out.join(CONFIG), &cfg.to_toml())?;
    if cfg.report.trajectories {
        artifacts::write_trajectories(&out.join(TRAJECTORIES), &ensemble, &prov)?;
    }
    if cfg.report.deviation {
        let rule = StopRule::stable(cfg.analysis.m);
        artifacts::write_deviation(&out.join(DEVIATION), &ensemble, cfg.analysis.m, &rule, &prov)?;
    }
    if cfg.report.fan {
        artifacts::write_fan(&out.join(FAN), &ensemble, &cfg.analysis.fan_quantiles, &prov)?;
    }
    let rep = report::build(&ensemble, cfg, &digest)?;
    let json = serde_json::to_string_pretty(&rep).expect("report serializes");
    write_text(&out.join(REPORT), &(json + "\n"))?;
    let exit = if strict && rep.any_violation() {
        EXIT_VIOLATION
    } else {
        EXIT_OK
    };
    Ok(RunOutcome { report: rep, exit })
}

/// Result of a replay, with the comparison against another table if requested.
#[derive(Debug, serde::Serialize)]
pub struct ReplayOutcome {
    pub summary: replay::ReplaySummary,
    pub config_matches: bool,
    pub against: Option<Vec<replay::Mismatch>>,
}

impl ReplayOutcome {
    pub fn passed(&self) -> bool {
        self.summary.passed() && self.config_matches && self.against.as_ref().is_none_or(|m| m.is_empty())
    }
}

/// Relative tolerance for comparing price columns across runs.
pub const AGAINST_REL_TOL: f64 = 1e-8;

/// Verifies a trajectory table against `cfg`, and optionally its price
/// column against another table.
pub fn replay_file(cfg: &RunConfig, table: &Path, against: Option<&Path>) -> Result<ReplayOutcome, CliError> {
    let prov = artifacts::read_provenance(table)?;
    let rows = artifacts::read_trajectories(table)?;
    let summary = replay::replay(&rows, cfg);
    let against = match against {
        Some(other) => {
            let other_rows = artifacts::read_trajectories(other)?;
            Some(replay::compare_prices(&rows, &other_rows, AGAINST_REL_TOL))
        }
        None => None,
    };
    Ok(ReplayOutcome {
        summary,
        config_matches: prov.config_sha256 == cfg.digest(),
        against,
    })
}

/// Default location of a run's trajectory table.
pub fn trajectories_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join(TRAJECTORIES)
}
