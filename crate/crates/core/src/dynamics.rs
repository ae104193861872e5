//! Step-by-step evolution of the system, trajectories and ensembles, and
//! detection of the stopping times defined through one-step-ahead
//! conditional expectations.
//!
//! A step from state `t` draws the return `R_{t+1}`, applies any forced
//! liquidation at the new ETH price, and then lets the speculator choose the
//! liability carried into step `t + 2`, optimizing against the law of
//! `R_{t+2}`. `events[t]` of a trajectory describes how `states[t]` was
//! reached and which stop conditions hold at it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    apply_liquidation, thresholds, CollateralMode, LiquidationKind, LiquidationOutcome, PathStatus, SystemParams,
    SystemState,
};
use crate::optimizer::{solve, Binding, DecisionResult};
use crate::quadrature::{integrate, QuadratureSpec};
use crate::returns::{ReturnModel, ReturnSchedule};

/// A stop condition that holds at a state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "level")]
pub enum Stop {
    /// Expected reciprocal supply rises: an expected price increase.
    Tau,
    /// Price strictly above the level.
    Tm(f64),
    /// Expected supply falls.
    S1,
    /// Expected supply no longer falls, after an earlier `S1`.
    S2,
}

impl Stop {
    pub fn label(&self) -> String {
        match self {
            Stop::Tau => "tau".into(),
            Stop::Tm(m) => format!("t_m({m})"),
            Stop::S1 => "s1".into(),
            Stop::S2 => "s2".into(),
        }
    }

    /// Inverse of [`Stop::label`].
    pub fn parse(s: &str) -> Option<Stop> {
        match s {
            "tau" => Some(Stop::Tau),
            "s1" => Some(Stop::S1),
            "s2" => Some(Stop::S2),
            _ => s
                .strip_prefix("t_m(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|v| v.parse().ok())
                .map(Stop::Tm),
        }
    }
}

/// One-step-ahead conditional expectations of the supply and price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalExpectations {
    pub e_inv_supply: f64,
    pub e_supply: f64,
    pub e_price: f64,
}

/// What happened on the way into a state and what holds at it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StepEvents {
    pub liquidation: LiquidationOutcome,
    /// The post-decision collateral constraint determined the decision.
    pub constraint_binding: bool,
    pub binding: Option<Binding>,
    /// The decision came from the non-concave fallback search.
    pub fallback: bool,
    pub stops: Vec<Stop>,
    /// Present when the detectors ran at this state.
    pub conditional: Option<ConditionalExpectations>,
    /// Why the detectors could not run, if they were due.
    pub detector_error: Option<String>,
}

impl StepEvents {
    pub fn has(&self, stop: Stop) -> bool {
        self.stops.contains(&stop)
    }

    pub fn has_tau(&self) -> bool {
        self.has(Stop::Tau)
    }
}

/// When and against which price levels the stop detectors run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Evaluate the expectation-based detectors every `every` steps; 0 disables them.
    pub every: usize,
    /// Price levels `m` for the `Z > m` stops.
    pub m_levels: Vec<f64>,
    /// Keep evaluating the expectation-based detectors once `tau` has fired.
    /// Statistics of the process stopped at `tau` do not need them.
    pub after_tau: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            every: 1,
            m_levels: vec![1.0],
            after_tau: true,
        }
    }
}

impl DetectorConfig {
    pub fn disabled() -> Self {
        Self {
            every: 0,
            m_levels: Vec::new(),
            after_tau: false,
        }
    }

    fn due(&self, t: usize) -> bool {
        self.every > 0 && t.is_multiple_of(self.every)
    }
}

/// Result of one deterministic transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: SystemState,
    pub liquidation: LiquidationOutcome,
    /// Absent when the path halted before the decision.
    pub decision: Option<DecisionResult>,
}

/// Advances `state` by one step with the realized return `r`; the speculator
/// optimizes against `decide_model`. Halted states stay frozen apart from the
/// time index. `hint` seeds the decision's root search.
pub fn step_with_return(
    state: &SystemState,
    r: f64,
    decide_model: &ReturnModel,
    params: &SystemParams,
    hint: Option<f64>,
) -> Result<Transition> {
    advance(state, r, decide_model, params, hint, true)
}

fn advance(
    state: &SystemState,
    r: f64,
    decide_model: &ReturnModel,
    params: &SystemParams,
    hint: Option<f64>,
    with_value: bool,
) -> Result<Transition> {
    if state.is_halted() {
        let mut frozen = *state;
        frozen.t += 1;
        return Ok(Transition {
            state: frozen,
            liquidation: LiquidationOutcome::default(),
            decision: None,
        });
    }
    if !(r >= 0.0 && r.is_finite()) {
        return Err(Error::Domain(format!(
            "return must be non-negative and finite, got {r}"
        )));
    }
    let x_next = state.x * r;
    let (post, liquidation) = apply_liquidation(state, x_next, params)?;
    let mut next = post;
    next.t = state.t + 1;
    if post.is_halted() {
        return Ok(Transition {
            state: next,
            liquidation,
            decision: None,
        });
    }
    // Collateral at stake next step is the position carried in, net of any
    // liquidation; the concurrent objective reads the position itself.
    let mut pre = post;
    pre.nbar = post.n;
    let cap = (liquidation.kind == LiquidationKind::Partial).then_some(post.l);
    let decision = match solve(&pre, decide_model, params, cap, hint, with_value) {
        Ok(d) => d,
        Err(Error::Insolvent(_)) => {
            next.status = PathStatus::Insolvent;
            return Ok(Transition {
                state: next,
                liquidation,
                decision: None,
            });
        }
        Err(e) => return Err(e),
    };
    let curve = params.curve();
    let price = curve.price(decision.supply_star);
    next.l = decision.l_star;
    next.supply = decision.supply_star;
    next.z = price;
    next.n = post.n + (decision.l_star - post.l) * price / x_next;
    next.nbar = match params.collateral_mode {
        CollateralMode::Lagged => post.n,
        CollateralMode::Concurrent => next.n,
    };
    next.y = next.n * x_next - next.l;
    if next.supply < params.v_floor {
        next.status = PathStatus::SupplyFloor;
    }
    Ok(Transition {
        state: next,
        liquidation,
        decision: Some(decision),
    })
}

/// Draws `R_{t+1}` and advances one step. Stop detection is left to the caller.
pub fn step<R: Rng + ?Sized>(
    state: &SystemState,
    schedule: &ReturnSchedule,
    params: &SystemParams,
    rng: &mut R,
) -> Result<(SystemState, StepEvents)> {
    if state.is_halted() {
        return Err(Error::Precondition(format!(
            "step from a halted state ({})",
            state.status.as_str()
        )));
    }
    let r = schedule.model_for(state.t + 1).sample(rng);
    let tr = step_with_return(state, r, schedule.model_for(state.t + 2), params, None)?;
    Ok((tr.state, transition_events(&tr)))
}

fn transition_events(tr: &Transition) -> StepEvents {
    StepEvents {
        liquidation: tr.liquidation,
        constraint_binding: tr.decision.is_some_and(|d| d.binding == Binding::CollateralCap),
        binding: tr.decision.map(|d| d.binding),
        fallback: tr.decision.is_some_and(|d| d.fallback),
        ..StepEvents::default()
    }
}

/// `E[1/calL_{t+1}]`, `E[calL_{t+1}]` and `E[Z_{t+1}]` given the state at `t`,
/// integrating the next decision over the return law in probability space.
///
/// Quadrature panels are split at the liquidation and exhaustion quantiles.
/// Each node's decision is seeded with the previous node's.
pub fn conditional_next(
    state: &SystemState,
    draw_model: &ReturnModel,
    decide_model: &ReturnModel,
    params: &SystemParams,
    spec: &QuadratureSpec,
) -> Result<ConditionalExpectations> {
    if state.is_halted() {
        return Err(Error::Precondition(format!(
            "conditional expectations at a halted state ({})",
            state.status.as_str()
        )));
    }
    let unavailable = |e: Error| Error::DetectorUnavailable(e.to_string());
    let mut hint: Option<f64> = None;
    let mut node = |r: f64| -> Result<[f64; 3]> {
        let tr = advance(state, r, decide_model, params, hint, false)?;
        if let Some(d) = tr.decision {
            hint = Some(d.l_star);
        }
        let s = tr.state.supply;
        Ok([1.0 / s, s, tr.state.z])
    };

    let values = if let Some(v) = draw_model.point_mass() {
        node(v).map_err(unavailable)?
    } else {
        let mut breaks = vec![0.0];
        if state.l > 0.0 && state.nbar > 0.0 {
            let th = thresholds(state.l, state.nbar, params).map_err(unavailable)?;
            for k in [th.c / state.x, th.b / state.x] {
                let u = draw_model.cdf(k);
                if u > 1e-14 && u < 1.0 - 1e-14 && u > *breaks.last().unwrap() {
                    breaks.push(u);
                }
            }
        }
        breaks.push(1.0);
        let s = state.supply;
        let abs = [spec.abs_tol / s, spec.abs_tol * s, spec.abs_tol * state.z.max(1e-300)];
        integrate(|u| node(draw_model.quantile(u)), &breaks, spec, abs)
            .map_err(unavailable)?
            .value
    };
    let cond = ConditionalExpectations {
        e_inv_supply: values[0],
        e_supply: values[1],
        e_price: values[2],
    };
    // Jensen: E[1/S] ≥ 1/E[S].
    if cond.e_inv_supply * cond.e_supply < 1.0 - 1e-9 {
        return Err(Error::DetectorUnavailable(format!(
            "expectations violate Jensen's inequality: E[1/S]·E[S] = {}",
            cond.e_inv_supply * cond.e_supply
        )));
    }
    Ok(cond)
}

/// Stop conditions holding at `state`.
///
/// `tol` is a relative dead band around the supply comparisons: the
/// expected-price-increase stop needs `E[1/S]·S > 1 + tol/2`, the
/// expected-supply-decrease stop needs `E[S] < S·(1 − tol)`. With these bands
/// Jensen's inequality makes the second imply the first even with
/// integration error below `tol/2`. `s1_seen` says whether the supply
/// decrease stop held at an earlier state of the same path.
pub fn detect_stops(
    state: &SystemState,
    cond: Option<&ConditionalExpectations>,
    m_levels: &[f64],
    s1_seen: bool,
    tol: f64,
) -> Vec<Stop> {
    let mut out = Vec::new();
    if let Some(c) = cond {
        if c.e_inv_supply * state.supply > 1.0 + 0.5 * tol {
            out.push(Stop::Tau);
        }
    }
    for &m in m_levels {
        if state.z > m {
            out.push(Stop::Tm(m));
        }
    }
    if let Some(c) = cond {
        let falling = c.e_supply < state.supply * (1.0 - tol);
        if falling {
            debug_assert!(out.contains(&Stop::Tau), "supply-decrease stop without the price stop");
            out.push(Stop::S1);
        } else if s1_seen {
            out.push(Stop::S2);
        }
    }
    out
}

/// A simulated path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    /// Stream of the master seed this path was drawn from.
    pub stream: u64,
    pub params: SystemParams,
    pub states: Vec<SystemState>,
    pub events: Vec<StepEvents>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn prices(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.z).collect()
    }

    /// Whether `E[1/calL_1] ≤ 1/calL_0` held at the start; `None` when the
    /// detectors did not run there.
    pub fn initial_condition_holds(&self) -> Option<bool> {
        let e = &self.events[0];
        e.conditional.map(|_| !e.has_tau())
    }

    /// First index at which `stop` holds.
    pub fn first(&self, stop: Stop) -> Option<usize> {
        self.events.iter().position(|e| e.has(stop))
    }

    /// First index at which the path is halted.
    pub fn halted_at(&self) -> Option<usize> {
        self.states.iter().position(|s| s.is_halted())
    }
}

struct Detectors<'a> {
    schedule: &'a ReturnSchedule,
    params: &'a SystemParams,
    config: &'a DetectorConfig,
    s1_seen: bool,
    tau_seen: bool,
}

impl Detectors<'_> {
    fn fill(&mut self, state: &SystemState, events: &mut StepEvents) {
        let mut cond = None;
        let wanted = self.config.after_tau || !self.tau_seen;
        if wanted && self.config.due(state.t) && !state.is_halted() {
            match conditional_next(
                state,
                self.schedule.model_for(state.t + 1),
                self.schedule.model_for(state.t + 2),
                self.params,
                &self.params.numerics.quadrature,
            ) {
                Ok(c) => cond = Some(c),
                Err(e) => events.detector_error = Some(e.to_string()),
            }
        }
        events.conditional = cond;
        events.stops = detect_stops(
            state,
            cond.as_ref(),
            &self.config.m_levels,
            self.s1_seen,
            self.params.numerics.detector_rel_tol,
        );
        if events.has(Stop::S1) {
            self.s1_seen = true;
        }
        if events.has_tau() {
            self.tau_seen = true;
        }
    }
}

/// Simulates `horizon` steps from `initial` with the given generator.
pub fn simulate_with<R: Rng + ?Sized>(
    initial: &SystemState,
    schedule: &ReturnSchedule,
    params: &SystemParams,
    horizon: usize,
    detectors: &DetectorConfig,
    rng: &mut R,
) -> Result<(Vec<SystemState>, Vec<StepEvents>)> {
    if horizon == 0 {
        return Err(Error::Precondition("horizon must be at least 1".into()));
    }
    params.validate()?;
    schedule.validate()?;
    let mut det = Detectors {
        schedule,
        params,
        config: detectors,
        s1_seen: false,
        tau_seen: false,
    };
    let mut states = Vec::with_capacity(horizon + 1);
    let mut events = Vec::with_capacity(horizon + 1);
    let mut state = *initial;
    state.t = 0;
    let mut ev = StepEvents::default();
    det.fill(&state, &mut ev);
    states.push(state);
    events.push(ev);
    for _ in 0..horizon {
        let (next, mut ev) = if state.is_halted() {
            let mut frozen = state;
            frozen.t += 1;
            (frozen, StepEvents::default())
        } else {
            step(&state, schedule, params, rng)?
        };
        det.fill(&next, &mut ev);
        state = next;
        states.push(state);
        events.push(ev);
    }
    Ok((states, events))
}

/// Generator for path `stream` under `seed`.
pub fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates one path on its own seed stream.
pub fn simulate(
    initial: &SystemState,
    schedule: &ReturnSchedule,
    params: &SystemParams,
    horizon: usize,
    detectors: &DetectorConfig,
    seed: u64,
    stream: u64,
) -> Result<Trajectory> {
    let mut rng = path_rng(seed, stream);
    let (states, events) = simulate_with(initial, schedule, params, horizon, detectors, &mut rng)?;
    Ok(Trajectory {
        seed,
        stream,
        params: *params,
        states,
        events,
    })
}

/// Simulates paths `0..n_paths` in parallel; the result is in path order and
/// does not depend on scheduling.
pub fn simulate_ensemble(
    initial: &SystemState,
    schedule: &ReturnSchedule,
    params: &SystemParams,
    horizon: usize,
    detectors: &DetectorConfig,
    seed: u64,
    n_paths: usize,
) -> Result<Vec<Trajectory>> {
    if n_paths == 0 {
        return Err(Error::Precondition("at least one path is required".into()));
    }
    (0..n_paths as u64)
        .into_par_iter()
        .map(|p| simulate(initial, schedule, params, horizon, detectors, seed, p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::solve_supply;

    fn params() -> SystemParams {
        SystemParams {
            demand: 100.0,
            alpha: 1.13,
            ..SystemParams::default()
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn fixed_point_is_stationary_under_a_degenerate_return() {
        let p = params();
        let model = ReturnModel::Uniform {
            lo: 1.0 - 1e-9,
            hi: 1.0 + 1e-9,
        };
        // With E[R] = 1 and no liquidation risk the decision is sqrt(D·S), so S = D is fixed.
        let s0 = SystemState::new(1.0, 100.0, 400.0, 400.0, &p).unwrap();
        let sched = ReturnSchedule::iid(model);
        let tr = simulate(&s0, &sched, &p, 3, &DetectorConfig::disabled(), 7, 0).unwrap();
        for s in &tr.states {
            assert!(rel(s.l, 100.0) < 1e-8, "{s:?}");
            assert!(rel(s.z, 1.0) < 1e-8);
        }
    }

    #[test]
    fn forced_liquidation_caps_the_decision() {
        let p = SystemParams {
            demand: 100.0,
            alpha: 1.0,
            ..SystemParams::default()
        };
        let s0 = SystemState::new(2.5, 100.0, 60.0, 60.0, &p).unwrap();
        let model = ReturnModel::lognormal_with_mean(1.0, 0.05);
        let tr = step_with_return(&s0, 2.2 / 2.5, &model, &p, None).unwrap();
        assert_eq!(tr.liquidation.kind, LiquidationKind::Partial);
        assert!(rel(tr.liquidation.ell, 36.0) < 1e-12);
        assert!(tr.state.l <= 64.0);
        assert!(tr.state.is_halted() || tr.decision.is_some());
    }

    #[test]
    fn horizon_contract_and_determinism() {
        let p = params();
        let s0 = SystemState::new(1.0, 100.0, 200.0, 200.0, &p).unwrap();
        let sched = ReturnSchedule::iid(ReturnModel::lognormal_with_mean(1.0008, 0.05));
        let det = DetectorConfig::disabled();
        assert!(simulate(&s0, &sched, &p, 0, &det, 1, 0).is_err());
        let one = simulate(&s0, &sched, &p, 1, &det, 1, 0).unwrap();
        assert_eq!(one.states.len(), 2);
        assert_eq!(one.events.len(), 2);
        let a = simulate(&s0, &sched, &p, 20, &det, 42, 3).unwrap();
        let b = simulate(&s0, &sched, &p, 20, &det, 42, 3).unwrap();
        assert_eq!(a, b);
        let c = simulate(&s0, &sched, &p, 20, &det, 42, 4).unwrap();
        assert_ne!(a.states, c.states);
        for (k, s) in a.states.iter().enumerate() {
            assert_eq!(s.t, k);
            assert!(rel(s.supply, p.zeta + s.l) < 1e-15);
            assert!(rel(s.z, p.demand / s.supply) < 1e-14);
        }
    }

    #[test]
    fn ensemble_is_in_path_order() {
        let p = params();
        let s0 = SystemState::new(1.0, 100.0, 200.0, 200.0, &p).unwrap();
        let sched = ReturnSchedule::iid(ReturnModel::lognormal_with_mean(1.0008, 0.05));
        let det = DetectorConfig::disabled();
        let ens = simulate_ensemble(&s0, &sched, &p, 5, &det, 9, 6).unwrap();
        for (i, t) in ens.iter().enumerate() {
            assert_eq!(t, &simulate(&s0, &sched, &p, 5, &det, 9, i as u64).unwrap());
        }
    }

    #[test]
    fn conditional_expectations_match_closed_form_without_liquidation_risk() {
        let p = params();
        let model = ReturnModel::lognormal_with_mean(1.0008, 0.05);
        let s = SystemState::new(1.0, 100.0, 400.0, 400.0, &p).unwrap();
        let c = conditional_next(&s, &model, &model, &p, &p.numerics.quadrature).unwrap();
        // The next decision does not depend on the return: sqrt(D·S·E[R]).
        let next = (p.demand * s.supply * model.mean()).sqrt();
        assert!(rel(c.e_supply, next) < 1e-8, "{c:?} vs {next}");
        assert!(rel(c.e_inv_supply, 1.0 / next) < 1e-8);
        assert!(rel(c.e_price, p.demand / next) < 1e-8);
        assert!(c.e_inv_supply >= 1.0 / c.e_supply * (1.0 - 1e-15));
    }

    #[test]
    fn conditional_expectations_collapse_for_a_point_mass() {
        let p = params();
        let draw = ReturnModel::Uniform { lo: 0.9, hi: 0.9 };
        let decide = ReturnModel::lognormal_with_mean(1.0008, 0.1);
        let s = SystemState::new(1.0, 100.0, 170.0, 170.0, &p).unwrap();
        let c = conditional_next(&s, &draw, &decide, &p, &p.numerics.quadrature).unwrap();
        let tr = step_with_return(&s, 0.9, &decide, &p, None).unwrap();
        assert_eq!(c.e_supply, tr.state.supply);
        assert_eq!(c.e_inv_supply, 1.0 / tr.state.supply);
        assert_eq!(c.e_price, tr.state.z);
    }

    #[test]
    fn conditional_expectations_agree_with_sampling_under_liquidation_risk() {
        let p = params();
        let model = ReturnModel::lognormal_with_mean(1.0, 0.15);
        let s = SystemState::new(1.0, 100.0, 180.0, 180.0, &p).unwrap();
        let c = conditional_next(&s, &model, &model, &p, &p.numerics.quadrature).unwrap();
        let mut rng = path_rng(5, 0);
        let n = 20_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let r = model.sample(&mut rng);
            let v = step_with_return(&s, r, &model, &p, None).unwrap().state.supply;
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (c.e_supply - mean).abs() < 4.0 * se + 1e-9,
            "{} vs {mean} ± {se}",
            c.e_supply
        );
    }

    #[test]
    fn stop_boundaries_are_strict() {
        let p = params();
        let s = SystemState::new(1.0, 100.0, 400.0, 400.0, &p).unwrap();
        let exact = ConditionalExpectations {
            e_inv_supply: 1.0 / s.supply,
            e_supply: s.supply,
            e_price: s.z,
        };
        let stops = detect_stops(&s, Some(&exact), &[1.0], false, 0.0);
        assert!(stops.is_empty(), "{stops:?}");
        let stops = detect_stops(&s, Some(&exact), &[1.0], true, 0.0);
        assert_eq!(stops, vec![Stop::S2]);
        let falling = ConditionalExpectations {
            e_inv_supply: 1.0 / 99.0,
            e_supply: 99.0,
            e_price: 100.0 / 99.0,
        };
        let stops = detect_stops(&s, Some(&falling), &[0.99], false, 1e-7);
        assert_eq!(stops, vec![Stop::Tau, Stop::Tm(0.99), Stop::S1]);
        for stop in stops {
            assert_eq!(Stop::parse(&stop.label()), Some(stop));
        }
    }

    #[test]
    fn decision_matches_optimizer_at_the_post_liquidation_state() {
        let p = params();
        let model = ReturnModel::lognormal_with_mean(1.0008, 0.05);
        let s = SystemState::new(1.0, 100.0, 300.0, 280.0, &p).unwrap();
        let tr = step_with_return(&s, 1.02, &model, &p, None).unwrap();
        let mut pre = s;
        pre.x = 1.02;
        pre.y = pre.n * pre.x - pre.l;
        pre.nbar = pre.n;
        let d = solve_supply(&pre, &model, &p).unwrap();
        assert_eq!(tr.state.l, d.l_star);
        assert_eq!(tr.state.nbar, s.n);
        assert!(rel(tr.state.n, s.n + (d.l_star - s.l) * tr.state.z / 1.02) < 1e-15);
    }
}
