//! Ensemble statistics for the stability results: stopped segments of
//! trajectories, deviation series with their running maximum and quadratic
//! variation, the theoretical tail bounds and the Monte Carlo checks against
//! them, martingale-direction tests, and forward-looking price variances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{conditional_next, step_with_return, Stop, Trajectory};
use crate::error::{Error, Result};
use crate::model::{apply_liquidation, threshold_b, SystemParams, SystemState};
use crate::optimizer::h_sensitivities;
use crate::returns::ReturnModel;

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Minimum ensemble size for an empirical tail report.
pub const MIN_TAIL_PATHS: usize = 100;

/// Daily growth factor equivalent to an annual one over 365 days.
pub fn daily_rate(annual: f64) -> f64 {
    annual.powf(1.0 / 365.0)
}

/// Where a stopped segment of a trajectory starts and ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopRule {
    /// Restart the process at the first state where this stop holds.
    #[serde(default)]
    pub restart_at: Option<Stop>,
    /// Stop at the first state (from the restart on) where any of these holds.
    pub stop_at: Vec<Stop>,
}

impl StopRule {
    /// The stable-domain rule: from the start up to `tau ∧ T_m`.
    pub fn stable(m: f64) -> Self {
        Self {
            restart_at: None,
            stop_at: vec![Stop::Tau, Stop::Tm(m)],
        }
    }

    /// The deleveraging window: restarted at `S1`, stopped at `S2`.
    pub fn deleveraging() -> Self {
        Self {
            restart_at: Some(Stop::S1),
            stop_at: vec![Stop::S2],
        }
    }

    fn needs_detectors(&self) -> bool {
        self.restart_at
            .iter()
            .chain(&self.stop_at)
            .any(|s| !matches!(s, Stop::Tm(_)))
    }
}

/// Why a stopped segment ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "cause", content = "stop")]
pub enum StopCause {
    Stop(Stop),
    /// The path halted (wipeout, insolvency or supply floor).
    Halted,
    /// The detectors failed at this state, so later stops are unknown.
    DetectorUnavailable,
    /// The trajectory ended first.
    Horizon,
}

/// Index range `[start, end]` of a trajectory under a stop rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub cause: StopCause,
}

impl Segment {
    /// Ended by the rule (or a halt) rather than by running out of path.
    pub fn stopped(&self) -> bool {
        self.cause != StopCause::Horizon
    }
}

fn holds(traj: &Trajectory, k: usize, stop: Stop) -> bool {
    match stop {
        // Read off the price so any level works, configured or not.
        Stop::Tm(m) => traj.states[k].z > m,
        s => traj.events[k].has(s),
    }
}

/// The stopped segment of `traj`; `None` when the restart stop never holds.
pub fn segment(traj: &Trajectory, rule: &StopRule) -> Option<Segment> {
    let n = traj.states.len();
    let start = match rule.restart_at {
        Some(s) => (0..n).find(|&k| holds(traj, k, s))?,
        None => 0,
    };
    let detectors = rule.needs_detectors();
    for k in start..n {
        if traj.states[k].is_halted() {
            return Some(Segment {
                start,
                end: k,
                cause: StopCause::Halted,
            });
        }
        if let Some(&s) = rule.stop_at.iter().find(|&&s| holds(traj, k, s)) {
            return Some(Segment {
                start,
                end: k,
                cause: StopCause::Stop(s),
            });
        }
        if detectors && traj.events[k].detector_error.is_some() {
            return Some(Segment {
                start,
                end: k,
                cause: StopCause::DetectorUnavailable,
            });
        }
    }
    Some(Segment {
        start,
        end: n - 1,
        cause: StopCause::Horizon,
    })
}

/// Absolute deviation `|m − Z|` of the price from a level, up to a stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationSeries {
    pub values: Vec<f64>,
    pub m: f64,
    /// Step index of the last value.
    pub stopped_at: usize,
    pub cause: StopCause,
}

impl DeviationSeries {
    /// Deviations of a raw price series, unstopped.
    pub fn from_prices(prices: &[f64], m: f64) -> Self {
        Self {
            values: prices.iter().map(|z| (m - z).abs()).collect(),
            m,
            stopped_at: prices.len().saturating_sub(1),
            cause: StopCause::Horizon,
        }
    }

    /// Deviations over the stopped segment of a trajectory.
    pub fn from_trajectory(traj: &Trajectory, m: f64, rule: &StopRule) -> Option<Self> {
        let seg = segment(traj, rule)?;
        Some(Self {
            values: traj.states[seg.start..=seg.end]
                .iter()
                .map(|s| (m - s.z).abs())
                .collect(),
            m,
            stopped_at: seg.end,
            cause: seg.cause,
        })
    }
}

/// Largest absolute value of the series.
pub fn max_process(series: &DeviationSeries) -> Result<f64> {
    if series.values.is_empty() {
        return Err(Error::Precondition("maximum of an empty series".into()));
    }
    Ok(series.values.iter().fold(0.0, |a: f64, v| a.max(v.abs())))
}

/// Sum of squared increments.
pub fn quadratic_variation(series: &DeviationSeries) -> Result<f64> {
    if series.values.len() < 2 {
        return Err(Error::Precondition(
            "quadratic variation needs at least two points".into(),
        ));
    }
    Ok(series.values.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum())
}

/// `m − 1/(κr)`, the width of the stable price range.
fn range_width(m: f64, kappa: f64, r: f64) -> Result<f64> {
    if !(kappa > 0.0 && r > 0.0 && m.is_finite()) {
        return Err(Error::Domain(format!(
            "bounds need kappa > 0 and r > 0 (kappa={kappa}, r={r}, m={m})"
        )));
    }
    Ok(m - 1.0 / (kappa * r))
}

fn tail_bound(factor: f64, epsilon: f64, m: f64, kappa: f64, r: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let w = range_width(m, kappa, r)?;
    Ok((factor * w / epsilon).clamp(0.0, 1.0))
}

/// Bound on the probability that the stopped maximum deviation exceeds `epsilon`:
/// `min(1, 2(m − 1/(κr))/ε)`, floored at zero.
pub fn doob_deviation_bound(epsilon: f64, m: f64, kappa: f64, r: f64) -> Result<f64> {
    tail_bound(2.0, epsilon, m, kappa, r)
}

/// Bound on the probability that the root quadratic variation of the stopped
/// deviation exceeds `epsilon`: `min(1, 6(m − 1/(κr))/ε)`, floored at zero.
pub fn burkholder_qv_bound(epsilon: f64, m: f64, kappa: f64, r: f64) -> Result<f64> {
    tail_bound(6.0, epsilon, m, kappa, r)
}

/// Which case of the expected-maximum result applies, by the position of
/// `1/(κr)` relative to `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeCase {
    /// `1/(κr) > m`; needs the overshoot to exceed `1/(κr) − m`.
    FloorAboveLevel,
    /// `1/(κr) = m`; needs a positive overshoot.
    FloorAtLevel,
    /// `1/(κr) < m`; any non-negative overshoot.
    FloorBelowLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedMaxBound {
    pub bound: f64,
    pub case: RangeCase,
}

/// Bound `2(m − 1/(κr))` on the expected stopped maximum deviation.
///
/// `overshoot` is the mean of `Z − m` over paths stopped above `m`, estimated
/// from an ensemble; `None` means no path stopped above `m`, so the overshoot
/// term vanishes and only the last case can be verified.
pub fn expected_max_bound(m: f64, kappa: f64, r: f64, overshoot: Option<f64>) -> Result<ExpectedMaxBound> {
    let w = range_width(m, kappa, r)?;
    let floor = 1.0 / (kappa * r);
    let case = if w < 0.0 {
        RangeCase::FloorAboveLevel
    } else if w == 0.0 {
        RangeCase::FloorAtLevel
    } else {
        RangeCase::FloorBelowLevel
    };
    let verified = match (case, overshoot) {
        (RangeCase::FloorAboveLevel, Some(e)) => e > floor - m,
        (RangeCase::FloorAtLevel, Some(e)) => e > 0.0,
        (RangeCase::FloorBelowLevel, Some(e)) => e >= 0.0,
        (RangeCase::FloorBelowLevel, None) => true,
        _ => false,
    };
    if !verified {
        return Err(Error::BoundInapplicable(format!(
            "no case of the expected-maximum bound verifies (m={m}, 1/(kappa r)={floor}, overshoot={overshoot:?})"
        )));
    }
    Ok(ExpectedMaxBound { bound: 2.0 * w, case })
}

/// Whether an empirical estimate is compatible with its theoretical bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVerdict {
    Consistent,
    Violated,
}

/// A theoretical bound next to its Monte Carlo estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_name: String,
    pub theoretical: f64,
    pub empirical: f64,
    /// Half-width of the 95% interval around `empirical`.
    pub ci_halfwidth: f64,
    pub n_paths: usize,
    pub verdict: BoundVerdict,
}

impl BoundReport {
    fn new(name: &str, theoretical: f64, empirical: f64, ci_halfwidth: f64, n_paths: usize) -> Self {
        let verdict = if empirical - ci_halfwidth > theoretical {
            BoundVerdict::Violated
        } else {
            BoundVerdict::Consistent
        };
        Self {
            bound_name: name.to_string(),
            theoretical,
            empirical,
            ci_halfwidth,
            n_paths,
            verdict,
        }
    }
}

/// Half-width of the Wilson score interval for `k` successes in `n` trials.
pub fn wilson_halfwidth(k: usize, n: usize, z: f64) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt()
}

/// Path statistic compared against a tail bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailStatistic {
    /// Running maximum of the stopped deviation.
    MaxDeviation,
    /// Square root of the stopped deviation's quadratic variation.
    SqrtQv,
}

/// Value of `statistic` on one stopped deviation series.
pub fn tail_statistic(series: &DeviationSeries, statistic: TailStatistic) -> Result<f64> {
    match statistic {
        TailStatistic::MaxDeviation => max_process(series),
        // A path stopped at its first state has no increments.
        TailStatistic::SqrtQv if series.values.len() == 1 => Ok(0.0),
        TailStatistic::SqrtQv => quadratic_variation(series).map(f64::sqrt),
    }
}

/// Frequency of `statistic > epsilon` over the stopped deviation series of
/// the ensemble, against the matching theoretical bound. Paths on which the
/// restart stop never holds are left out.
pub fn empirical_tail_probability(
    ensemble: &[Trajectory],
    statistic: TailStatistic,
    epsilon: f64,
    m: f64,
    rule: &StopRule,
    kappa: f64,
    r: f64,
) -> Result<BoundReport> {
    let (name, theoretical) = match statistic {
        TailStatistic::MaxDeviation => ("doob_max_deviation", doob_deviation_bound(epsilon, m, kappa, r)?),
        TailStatistic::SqrtQv => ("burkholder_sqrt_qv", burkholder_qv_bound(epsilon, m, kappa, r)?),
    };
    let mut n = 0;
    let mut hits = 0;
    for traj in ensemble {
        if let Some(series) = DeviationSeries::from_trajectory(traj, m, rule) {
            n += 1;
            if tail_statistic(&series, statistic)? > epsilon {
                hits += 1;
            }
        }
    }
    if n < MIN_TAIL_PATHS {
        return Err(Error::Precondition(format!(
            "tail probabilities need at least {MIN_TAIL_PATHS} stopped paths, got {n}"
        )));
    }
    Ok(BoundReport::new(
        name,
        theoretical,
        hits as f64 / n as f64,
        wilson_halfwidth(hits, n, Z95),
        n,
    ))
}

/// Ensemble summary of the stopped maximum deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedMaxReport {
    pub report: BoundReport,
    pub case: RangeCase,
    /// Mean of `Z − m` over the paths stopped above `m`.
    pub overshoot: Option<f64>,
}

/// Mean stopped maximum deviation against `2(m − 1/(κr))`, with the case of
/// the bound re-verified from the ensemble's overshoot.
pub fn expected_max_report(
    ensemble: &[Trajectory],
    m: f64,
    rule: &StopRule,
    kappa: f64,
    r: f64,
) -> Result<ExpectedMaxReport> {
    let mut maxima = Vec::new();
    let mut overshoots = Vec::new();
    for traj in ensemble {
        let Some(series) = DeviationSeries::from_trajectory(traj, m, rule) else {
            continue;
        };
        maxima.push(max_process(&series)?);
        let z_end = traj.states[series.stopped_at].z;
        if z_end > m {
            overshoots.push(z_end - m);
        }
    }
    if maxima.len() < 2 {
        return Err(Error::Precondition(
            "expected maximum needs at least two stopped paths".into(),
        ));
    }
    let overshoot = (!overshoots.is_empty()).then(|| mean(&overshoots));
    let bound = expected_max_bound(m, kappa, r, overshoot)?;
    let (mu, se) = mean_and_se(&maxima);
    Ok(ExpectedMaxReport {
        report: BoundReport::new("expected_max_deviation", bound.bound, mu, Z95 * se, maxima.len()),
        case: bound.case,
        overshoot,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample mean and its standard error.
fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mu = mean(v);
    if v.len() < 2 {
        return (mu, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0);
    (mu, (var / n).sqrt())
}

/// State quantity followed by the stopped-process tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "level")]
pub enum Quantity {
    Price,
    Supply,
    /// `|m − Z|`.
    Deviation(f64),
}

impl Quantity {
    pub fn of(&self, s: &SystemState) -> f64 {
        match self {
            Quantity::Price => s.z,
            Quantity::Supply => s.supply,
            Quantity::Deviation(m) => (m - s.z).abs(),
        }
    }
}

/// A quantity along one stopped segment, indexed from the restart.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppedPath {
    pub values: Vec<f64>,
    /// The segment ended by the rule or a halt, so the process is constant after it.
    pub stopped: bool,
}

impl StoppedPath {
    /// Value at `k` steps after the restart, if observed.
    fn at(&self, k: usize) -> Option<f64> {
        match self.values.get(k) {
            Some(&v) => Some(v),
            None if self.stopped => self.values.last().copied(),
            None => None,
        }
    }
}

/// Stopped segments of the ensemble, aligned at their restart.
pub fn stopped_paths(ensemble: &[Trajectory], rule: &StopRule, quantity: Quantity) -> Vec<StoppedPath> {
    ensemble
        .iter()
        .filter_map(|traj| {
            let seg = segment(traj, rule)?;
            Some(StoppedPath {
                values: traj.states[seg.start..=seg.end]
                    .iter()
                    .map(|s| quantity.of(s))
                    .collect(),
                stopped: seg.stopped(),
            })
        })
        .collect()
}

/// Direction of drift being tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drift {
    /// Non-decreasing conditional means.
    Submartingale,
    /// Non-increasing conditional means.
    Supermartingale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTest {
    pub drift: Drift,
    /// Steps with at least two paths contributing an increment.
    pub steps_tested: usize,
    /// Steps whose mean increment has the right sign within the band.
    pub steps_consistent: usize,
    pub fraction: f64,
    /// Most adverse mean increment in standard errors (positive is adverse).
    pub worst_z: f64,
}

impl MartingaleTest {
    pub fn passes(&self, min_fraction: f64) -> bool {
        self.steps_tested > 0 && self.fraction >= min_fraction
    }
}

/// Step-wise test of the drift of stopped paths.
///
/// At each step after the restart the mean one-step increment over all paths
/// still observed (stopped paths contribute zero) must not point against
/// `drift` by more than `band` standard errors plus a relative floor for
/// rounding.
pub fn martingale_test(paths: &[StoppedPath], drift: Drift, band: f64) -> MartingaleTest {
    let len = paths.iter().map(|p| p.values.len()).max().unwrap_or(0);
    let scale = paths
        .iter()
        .flat_map(|p| p.values.iter())
        .fold(0.0, |a: f64, v| a.max(v.abs()));
    let floor = 1e-12 * (1.0 + scale);
    let (mut tested, mut ok) = (0, 0);
    let mut worst = f64::NEG_INFINITY;
    let mut incs = Vec::with_capacity(paths.len());
    for k in 0..len.saturating_sub(1) {
        incs.clear();
        incs.extend(paths.iter().filter_map(|p| Some(p.at(k + 1)? - p.at(k)?)));
        if incs.len() < 2 {
            continue;
        }
        let (mu, se) = mean_and_se(&incs);
        let adverse = match drift {
            Drift::Submartingale => -mu,
            Drift::Supermartingale => mu,
        };
        tested += 1;
        if adverse <= band * se + floor {
            ok += 1;
        }
        if se > 0.0 {
            worst = worst.max(adverse / se);
        } else if adverse > floor {
            worst = f64::INFINITY;
        }
    }
    MartingaleTest {
        drift,
        steps_tested: tested,
        steps_consistent: ok,
        fraction: if tested > 0 { ok as f64 / tested as f64 } else { 0.0 },
        worst_z: if tested > 0 { worst } else { f64::NAN },
    }
}

/// Occurrences of the first time each path reaches `stop`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopHistogram {
    pub stop: Stop,
    /// `(step, paths first stopping there)`, ascending by step.
    pub counts: Vec<(usize, usize)>,
    pub never: usize,
}

pub fn stop_histogram(ensemble: &[Trajectory], stop: Stop) -> StopHistogram {
    let mut counts = std::collections::BTreeMap::new();
    let mut never = 0;
    for traj in ensemble {
        match (0..traj.states.len()).find(|&k| holds(traj, k, stop)) {
            Some(k) => *counts.entry(k).or_insert(0) += 1,
            None => never += 1,
        }
    }
    StopHistogram {
        stop,
        counts: counts.into_iter().collect(),
        never,
    }
}

/// Empirical quantiles of `quantity` across the ensemble at every step.
/// Row `t` holds one value per probability; quantiles interpolate linearly.
pub fn quantile_fan(ensemble: &[Trajectory], quantity: Quantity, probs: &[f64]) -> Vec<Vec<f64>> {
    let len = ensemble.iter().map(|t| t.states.len()).min().unwrap_or(0);
    let mut col = Vec::with_capacity(ensemble.len());
    (0..len)
        .map(|t| {
            col.clear();
            col.extend(ensemble.iter().map(|tr| quantity.of(&tr.states[t])));
            col.sort_by(f64::total_cmp);
            probs.iter().map(|&p| interpolated_quantile(&col, p)).collect()
        })
        .collect()
}

fn interpolated_quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (i, frac) = (h.floor() as usize, h.fract());
    match sorted.get(i + 1) {
        Some(&next) => sorted[i] + frac * (next - sorted[i]),
        None => sorted[i],
    }
}

/// Forward-looking price variance from linearizing the decision in the return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceApproximation {
    /// `P′(E[S])² · h′² · Var(R)`; for unit-elastic demand `D²h′²Var(R)/E[S]⁴`.
    pub delta_method: f64,
    /// The same with the demand entering to the first power, `D·h′²·Var(R)/E[S]⁴`.
    pub demand_first_power: f64,
    /// Sensitivity of the decision to the realized return at the mean return.
    pub dh_drho: f64,
    pub var_return: f64,
    /// Expected next supply.
    pub expected_supply: f64,
}

/// Variance of the next price seen from the post-decision `state`. The
/// return drawn next follows `draw_model`; the decision after it uses
/// `decide_model`.
pub fn variance_approximation(
    state: &SystemState,
    draw_model: &ReturnModel,
    decide_model: &ReturnModel,
    params: &SystemParams,
) -> Result<VarianceApproximation> {
    let var_return = draw_model.variance();
    let rho = draw_model.mean();
    let (post, _) = apply_liquidation(state, state.x * rho, params)?;
    if post.is_halted() {
        return Err(Error::SensitivityUndefined("the mean return halts the path".into()));
    }
    let mut pre = post;
    pre.nbar = post.n;
    let dh_drho = if var_return == 0.0 {
        0.0
    } else {
        h_sensitivities(&pre, decide_model, params, state.x)?.dh_drho
    };
    let expected_supply =
        conditional_next(state, draw_model, decide_model, params, &params.numerics.quadrature)?.e_supply;
    let slope = params.curve().d1(expected_supply);
    let lin = dh_drho * dh_drho * var_return;
    Ok(VarianceApproximation {
        delta_method: slope * slope * lin,
        demand_first_power: params.demand * lin / expected_supply.powi(4),
        dh_drho,
        var_return,
        expected_supply,
    })
}

/// Monte Carlo variance of the next price from the post-decision `state`.
pub fn one_step_price_variance(
    state: &SystemState,
    draw_model: &ReturnModel,
    decide_model: &ReturnModel,
    params: &SystemParams,
    n_draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_draws < 2 {
        return Err(Error::Precondition("variance needs at least two draws".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..n_draws)
        .map(|_| {
            let r = draw_model.sample(&mut rng);
            step_with_return(state, r, decide_model, params, None).map(|t| t.state.z)
        })
        .collect::<Result<_>>()?;
    let mu = mean(&z);
    let sq: Vec<f64> = z.iter().map(|v| (v - mu).powi(2)).collect();
    let (var, se) = mean_and_se(&sq);
    let n = n_draws as f64;
    Ok((var * n / (n - 1.0), se))
}

/// One-step price variances of two systems under common return draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeVariance {
    pub var_stable: f64,
    pub var_strained: f64,
    /// Standard error of `var_strained − var_stable` from the paired draws.
    pub se_difference: f64,
    pub n_draws: usize,
}

impl RegimeVariance {
    /// `var_strained − var_stable` in standard errors.
    pub fn margin(&self) -> f64 {
        (self.var_strained - self.var_stable) / self.se_difference
    }
}

/// Compares one-step price variances of two post-decision states that differ
/// only in their collateral, under common return draws.
///
/// Both states must sit at least `margin` above their liquidation trigger.
#[allow(clippy::too_many_arguments)]
pub fn regime_variance_compare(
    stable: &SystemState,
    strained: &SystemState,
    draw_model: &ReturnModel,
    decide_model: &ReturnModel,
    params: &SystemParams,
    n_draws: usize,
    margin: f64,
    seed: u64,
) -> Result<RegimeVariance> {
    let same = |a: f64, b: f64| a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
    if !(same(stable.x, strained.x) && same(stable.l, strained.l) && same(stable.supply, strained.supply)) {
        return Err(Error::RegimeCompare(
            "states must differ only in their collateral".into(),
        ));
    }
    for (label, s) in [("stable", stable), ("strained", strained)] {
        if s.is_halted() {
            return Err(Error::RegimeCompare(format!("{label} state is halted")));
        }
        let b = threshold_b(s.l, s.nbar, params.beta).map_err(|e| Error::RegimeCompare(e.to_string()))?;
        if s.x < b + margin {
            return Err(Error::RegimeCompare(format!(
                "{label} state's ETH price {} is within {margin} of its liquidation trigger {b}",
                s.x
            )));
        }
    }
    if n_draws < 2 {
        return Err(Error::Precondition("variance needs at least two draws".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zs = Vec::with_capacity(n_draws);
    let mut zu = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let r = draw_model.sample(&mut rng);
        zs.push(step_with_return(stable, r, decide_model, params, None)?.state.z);
        zu.push(step_with_return(strained, r, decide_model, params, None)?.state.z);
    }
    let (ms, mu) = (mean(&zs), mean(&zu));
    let diff: Vec<f64> = zs
        .iter()
        .zip(&zu)
        .map(|(a, b)| (b - mu).powi(2) - (a - ms).powi(2))
        .collect();
    let (_, se) = mean_and_se(&diff);
    let n = n_draws as f64;
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(RegimeVariance {
        var_stable: var(&zs, ms),
        var_strained: var(&zu, mu),
        se_difference: se * n / (n - 1.0),
        n_draws,
    })
}
