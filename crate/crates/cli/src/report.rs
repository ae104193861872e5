//! The JSON run report. Every field is produced by a library operation;
//! unavailable results carry the error that prevented them.

use serde::Serialize;
use stbl_core::analysis::{
    burkholder_qv_bound, doob_deviation_bound, empirical_tail_probability, expected_max_bound, expected_max_report,
    martingale_test, one_step_price_variance, regime_variance_compare, stop_histogram, stopped_paths,
    variance_approximation, BoundReport, BoundVerdict, Drift, ExpectedMaxBound, ExpectedMaxReport, MartingaleTest,
    Quantity, RegimeVariance, StopHistogram, StopRule, TailStatistic, VarianceApproximation,
};
use stbl_core::assumptions::{check_assumptions, AssumptionReport};
use stbl_core::dynamics::{Stop, Trajectory};
use stbl_core::model::{PathStatus, SystemState};

use crate::config::RunConfig;

/// A result or the reason it is missing.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome<T> {
    Ok(T),
    Unavailable(String),
}

impl<T> From<stbl_core::Result<T>> for Outcome<T> {
    fn from(r: stbl_core::Result<T>) -> Self {
        match r {
            Ok(v) => Outcome::Ok(v),
            Err(e) => Outcome::Unavailable(e.to_string()),
        }
    }
}

impl<T> Outcome<T> {
    pub fn ok(&self) -> Option<&T> {
        match self {
            Outcome::Ok(v) => Some(v),
            Outcome::Unavailable(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoreticalBounds {
    pub epsilon: f64,
    pub m: f64,
    pub kappa: f64,
    pub r: f64,
    pub doob_max_deviation: Outcome<f64>,
    pub burkholder_sqrt_qv: Outcome<f64>,
    /// Verified with a vanishing overshoot; the ensemble report re-verifies it.
    pub expected_max_deviation: Outcome<ExpectedMaxBound>,
}

impl TheoreticalBounds {
    pub fn new(cfg: &RunConfig) -> Self {
        let (eps, m) = (cfg.analysis.epsilon, cfg.analysis.m);
        let (kappa, r) = (cfg.params.kappa, cfg.params.r_bound);
        Self {
            epsilon: eps,
            m,
            kappa,
            r,
            doob_max_deviation: doob_deviation_bound(eps, m, kappa, r).into(),
            burkholder_sqrt_qv: burkholder_qv_bound(eps, m, kappa, r).into(),
            expected_max_deviation: expected_max_bound(m, kappa, r, None).into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalBounds {
    pub max_deviation: Outcome<BoundReport>,
    pub sqrt_qv: Outcome<BoundReport>,
    pub expected_max: Outcome<ExpectedMaxReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftCheck {
    pub window: String,
    pub quantity: Quantity,
    pub expected: Drift,
    pub test: MartingaleTest,
    pub classified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceSection {
    pub approximation: Outcome<VarianceApproximation>,
    /// One-step Monte Carlo variance of the price and its standard error.
    pub monte_carlo: Option<Outcome<(f64, f64)>>,
    pub regime_comparison: Option<Outcome<RegimeVariance>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatusCounts {
    pub active: usize,
    pub wiped_out: usize,
    pub insolvent: usize,
    pub supply_floor: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InitialCondition {
    /// Paths where `E[1/S_1] ≤ 1/S_0` held at the start.
    pub holds: usize,
    pub fails: usize,
    pub unavailable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub config_sha256: String,
    pub n_paths: usize,
    pub horizon: usize,
    pub assumptions: Option<AssumptionReport>,
    pub initial_condition: InitialCondition,
    pub final_status: StatusCounts,
    pub detector_failures: usize,
    pub theoretical_bounds: TheoreticalBounds,
    pub empirical_bounds: EmpiricalBounds,
    pub drift_checks: Vec<DriftCheck>,
    pub stop_histograms: Vec<StopHistogram>,
    pub variance: Option<VarianceSection>,
}

impl Report {
    /// Whether any bound was found violated.
    pub fn any_violation(&self) -> bool {
        let e = &self.empirical_bounds;
        [
            e.max_deviation.ok(),
            e.sqrt_qv.ok(),
            e.expected_max.ok().map(|r| &r.report),
        ]
        .into_iter()
        .flatten()
        .any(|r| r.verdict == BoundVerdict::Violated)
    }
}

fn drift_checks(ensemble: &[Trajectory], cfg: &RunConfig) -> Vec<DriftCheck> {
    let a = &cfg.analysis;
    let windows = [
        (
            "stable",
            StopRule::stable(a.m),
            vec![
                (Quantity::Price, Drift::Supermartingale),
                (Quantity::Supply, Drift::Submartingale),
                (Quantity::Deviation(a.m), Drift::Submartingale),
            ],
        ),
        (
            "deleveraging",
            StopRule::deleveraging(),
            vec![
                (Quantity::Price, Drift::Submartingale),
                (Quantity::Supply, Drift::Supermartingale),
            ],
        ),
    ];
    let mut out = Vec::new();
    for (name, rule, tests) in windows {
        for (quantity, expected) in tests {
            let paths = stopped_paths(ensemble, &rule, quantity);
            let test = martingale_test(&paths, expected, a.martingale_band);
            out.push(DriftCheck {
                window: name.to_string(),
                quantity,
                expected,
                classified: test.passes(a.martingale_min_fraction),
                test,
            });
        }
    }
    out
}

fn variance_section(cfg: &RunConfig, s0: &SystemState) -> VarianceSection {
    let p = &cfg.params;
    let draw = cfg.returns.model_for(1);
    let decide = cfg.returns.model_for(2);
    let a = &cfg.analysis;
    let monte_carlo = (a.variance_draws >= 2)
        .then(|| one_step_price_variance(s0, draw, decide, p, a.variance_draws, cfg.seed).into());
    let regime_comparison = a.regime.map(|r| {
        SystemState::new(s0.x, s0.l, r.strained_collateral, r.strained_collateral, p)
            .and_then(|strained| regime_variance_compare(s0, &strained, draw, decide, p, r.draws, r.margin, cfg.seed))
            .into()
    });
    VarianceSection {
        approximation: variance_approximation(s0, draw, decide, p).into(),
        monte_carlo,
        regime_comparison,
    }
}

/// Assumption checks at the initial state against the first step's law.
pub fn initial_assumptions(cfg: &RunConfig) -> stbl_core::Result<AssumptionReport> {
    let s0 = cfg.initial.state(&cfg.params)?;
    Ok(check_assumptions(cfg.returns.model_for(1), &s0, &cfg.params))
}

pub fn build(ensemble: &[Trajectory], cfg: &RunConfig, config_sha256: &str) -> stbl_core::Result<Report> {
    let s0 = cfg.initial.state(&cfg.params)?;
    let a = &cfg.analysis;
    let (kappa, r) = (cfg.params.kappa, cfg.params.r_bound);
    let rule = StopRule::stable(a.m);

    let mut initial_condition = InitialCondition {
        holds: 0,
        fails: 0,
        unavailable: 0,
    };
    let mut final_status = StatusCounts {
        active: 0,
        wiped_out: 0,
        insolvent: 0,
        supply_floor: 0,
    };
    let mut detector_failures = 0;
    for t in ensemble {
        match t.initial_condition_holds() {
            Some(true) => initial_condition.holds += 1,
            Some(false) => initial_condition.fails += 1,
            None => initial_condition.unavailable += 1,
        }
        match t.states.last().map(|s| s.status).unwrap_or_default() {
            PathStatus::Active => final_status.active += 1,
            PathStatus::WipedOut => final_status.wiped_out += 1,
            PathStatus::Insolvent => final_status.insolvent += 1,
            PathStatus::SupplyFloor => final_status.supply_floor += 1,
        }
        detector_failures += t.events.iter().filter(|e| e.detector_error.is_some()).count();
    }

    let tail = |stat| empirical_tail_probability(ensemble, stat, a.epsilon, a.m, &rule, kappa, r).into();
    let empirical_bounds = EmpiricalBounds {
        max_deviation: tail(TailStatistic::MaxDeviation),
        sqrt_qv: tail(TailStatistic::SqrtQv),
        expected_max: expected_max_report(ensemble, a.m, &rule, kappa, r).into(),
    };

    let mut stops = vec![Stop::Tau, Stop::S1, Stop::S2];
    stops.extend(cfg.detectors.m_levels.iter().map(|&m| Stop::Tm(m)));
    Ok(Report {
        seed: cfg.seed,
        config_sha256: config_sha256.to_string(),
        n_paths: ensemble.len(),
        horizon: cfg.horizon,
        assumptions: cfg
            .report
            .assumptions
            .then(|| check_assumptions(cfg.returns.model_for(1), &s0, &cfg.params)),
        initial_condition,
        final_status,
        detector_failures,
        theoretical_bounds: TheoreticalBounds::new(cfg),
        empirical_bounds,
        drift_checks: drift_checks(ensemble, cfg),
        stop_histograms: stops.into_iter().map(|s| stop_histogram(ensemble, s)).collect(),
        variance: cfg.report.variance.then(|| variance_section(cfg, &s0)),
    })
}
