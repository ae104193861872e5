//! Run configuration: a TOML document with defaults for every key, strict
//! about unknown keys, validated before anything runs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stbl_core::dynamics::DetectorConfig;
use stbl_core::model::{SystemParams, SystemState};
use stbl_core::returns::{ReturnModel, ReturnSchedule};
use stbl_core::Error as CoreError;

use crate::error::CliError;

/// Starting point of every path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    /// ETH price.
    pub x: f64,
    /// Speculator liability.
    pub l: f64,
    /// Speculator ETH position.
    pub n: f64,
    /// Collateral at stake for the first step; defaults to `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nbar: Option<f64>,
}

impl Default for InitialState {
    fn default() -> Self {
        Self {
            x: 1.0,
            l: 100.0,
            n: 400.0,
            nbar: None,
        }
    }
}

impl InitialState {
    pub fn state(&self, params: &SystemParams) -> stbl_core::Result<SystemState> {
        SystemState::new(self.x, self.l, self.n, self.nbar.unwrap_or(self.n), params)
    }
}

/// Optional paired comparison of the initial state against a less
/// collateralized copy of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    /// Position and collateral of the strained copy.
    pub strained_collateral: f64,
    /// Required distance of both ETH prices above their liquidation trigger.
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_draws")]
    pub draws: usize,
}

fn default_margin() -> f64 {
    0.01
}

fn default_draws() -> usize {
    10_000
}

/// Parameters of the statistics in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Deviation threshold for the tail bounds.
    pub epsilon: f64,
    /// Price level the deviation is measured from.
    pub m: f64,
    /// Standard errors allowed against the tested drift.
    pub martingale_band: f64,
    /// Share of steps that must pass for a drift classification.
    pub martingale_min_fraction: f64,
    /// One-step Monte Carlo draws for the initial-state price variance; 0 skips it.
    pub variance_draws: usize,
    pub fan_quantiles: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regime: Option<RegimeConfig>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            m: 1.0,
            martingale_band: 3.0,
            martingale_min_fraction: 0.95,
            variance_draws: 10_000,
            fan_quantiles: vec![0.05, 0.25, 0.5, 0.75, 0.95],
            regime: None,
        }
    }
}

/// Which artifacts a run writes besides the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportToggles {
    pub trajectories: bool,
    pub fan: bool,
    pub deviation: bool,
    pub assumptions: bool,
    pub variance: bool,
}

impl Default for ReportToggles {
    fn default() -> Self {
        Self {
            trajectories: true,
            fan: true,
            deviation: true,
            assumptions: true,
            variance: true,
        }
    }
}

fn default_returns() -> ReturnSchedule {
    ReturnSchedule::iid(ReturnModel::Lognormal { mu: 0.0, sigma: 0.04 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; path `i` uses stream `i` of it.
    pub seed: u64,
    pub paths: usize,
    pub horizon: usize,
    pub out: PathBuf,
    pub params: SystemParams,
    pub initial: InitialState,
    pub returns: ReturnSchedule,
    pub detectors: DetectorConfig,
    pub analysis: AnalysisConfig,
    pub report: ReportToggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            paths: 1000,
            horizon: 100,
            out: PathBuf::from("out"),
            params: SystemParams::default(),
            initial: InitialState::default(),
            returns: default_returns(),
            detectors: DetectorConfig::default(),
            analysis: AnalysisConfig::default(),
            report: ReportToggles::default(),
        }
    }
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn core_invalid(prefix: &str, e: CoreError) -> CliError {
    match e {
        CoreError::InvalidParameter { field, .. } => invalid(format!("{prefix}.{field}"), e.to_string()),
        other => invalid(prefix, other.to_string()),
    }
}

impl RunConfig {
    /// Checks every invariant, naming the offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.paths < 1 {
            return Err(invalid("paths", "at least one path is required"));
        }
        if self.horizon < 1 {
            return Err(invalid("horizon", "the horizon must be at least 1"));
        }
        self.params.validate().map_err(|e| core_invalid("params", e))?;
        self.returns.validate().map_err(|e| core_invalid("returns", e))?;
        self.initial
            .state(&self.params)
            .map_err(|e| core_invalid("initial", e))?;
        if self.detectors.m_levels.iter().any(|m| !m.is_finite()) {
            return Err(invalid("detectors.m_levels", "levels must be finite"));
        }
        let a = &self.analysis;
        if !(a.epsilon > 0.0 && a.epsilon.is_finite()) {
            return Err(invalid(
                "analysis.epsilon",
                format!("must be positive, got {}", a.epsilon),
            ));
        }
        if !a.m.is_finite() {
            return Err(invalid("analysis.m", "must be finite"));
        }
        if !(a.martingale_band >= 0.0) {
            return Err(invalid("analysis.martingale_band", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&a.martingale_min_fraction) {
            return Err(invalid("analysis.martingale_min_fraction", "must lie in [0, 1]"));
        }
        if a.fan_quantiles.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("analysis.fan_quantiles", "probabilities must lie in [0, 1]"));
        }
        if let Some(r) = &a.regime {
            if !(r.strained_collateral > 0.0) {
                return Err(invalid("analysis.regime.strained_collateral", "must be positive"));
            }
            if r.draws < 2 {
                return Err(invalid("analysis.regime.draws", "at least two draws"));
            }
        }
        Ok(())
    }

    /// Canonical TOML form; parsing it gives back the same configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// SHA-256 of the canonical form, hex encoded. The output directory is
    /// left out so that moving a run does not change its identity.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = toml::Deserializer::new(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        invalid(
            if path == "." { String::new() } else { path },
            e.into_inner().message().trim(),
        )
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.params.beta, 1.5);
        assert_eq!(cfg.analysis.epsilon, 0.1);
    }

    #[test]
    fn invariant_errors_name_the_key() {
        let err = parse_config("[params]\nbeta = 0.9\n").unwrap_err().to_string();
        assert!(err.contains("params.beta"), "{err}");
        assert!(err.contains("β > 1"), "{err}");
        let err = parse_config("paths = 0").unwrap_err().to_string();
        assert!(err.contains("paths"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = parse_config("[params]\nbetta = 1.5\n").unwrap_err().to_string();
        assert!(err.contains("params"), "{err}");
        assert!(err.contains("betta"), "{err}");
        let err = parse_config("[returns.base]\nkind = \"lognormal\"\nmu = 0.0\nsigma = 0.1\nextra = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("extra"), "{err}");
    }

    #[test]
    fn malformed_documents_fail() {
        assert!(parse_config("seed = ").is_err());
        assert!(parse_config("seed = \"x\"").unwrap_err().to_string().contains("seed"));
    }

    #[test]
    fn canonical_form_round_trips() {
        let text = r#"
seed = 7
paths = 20
horizon = 5
[params]
demand = 250
alpha = 1.2
[initial]
x = 2.0
l = 50.0
n = 90.0
nbar = 80.0
[returns]
base = { kind = "lognormal", mu = 0.001, sigma = 0.03 }
shifts = [{ from_step = 3, model = { kind = "uniform", lo = 0.9, hi = 1.1 } }]
[detectors]
every = 2
m_levels = [1.0, 1.05]
[analysis]
regime = { strained_collateral = 60.0 }
"#;
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.params.demand, 250.0);
        let again = parse_config(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.digest(), again.digest());
    }
}
