//! Numerical checks of the standing assumptions at a decision state.
//!
//! Each check reports the quantity it evaluated so a failing verdict can be
//! traced. Conditions quantified over all liabilities are evaluated on a grid
//! spanning the feasible range and reported as such.

use serde::{Deserialize, Serialize};

use crate::model::{threshold_b, threshold_c, DemandMode, SystemParams, SystemState};
use crate::optimizer::{collateral_cap, liquidation_slope_integral, psi_derivatives};
use crate::returns::ReturnModel;

/// Outcome of one assumption check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Fails,
    /// Verified at every point of a finite grid.
    HoldsNumericallyOnGrid,
}

impl Verdict {
    pub fn ok(self) -> bool {
        self != Verdict::Fails
    }

    fn from_bool(b: bool) -> Self {
        if b {
            Verdict::Holds
        } else {
            Verdict::Fails
        }
    }

    fn on_grid(b: bool) -> Self {
        if b {
            Verdict::HoldsNumericallyOnGrid
        } else {
            Verdict::Fails
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    /// Assumption number, 1 to 11.
    pub id: u8,
    pub name: String,
    pub verdict: Verdict,
    /// Evaluated left-hand side.
    pub value: f64,
    /// Threshold it was compared against.
    pub threshold: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    /// Whether the supply clears the level `(27/46)·αD` offered as
    /// sufficient for the curvature condition. The condition itself has a
    /// minimum of 12 at collateral factor 3/2, so it cannot hold; the flag is
    /// reported for reference only.
    pub curvature_sufficient_level: bool,
    /// Objective curvature at the carried liability, scaled by supply. The
    /// curvature condition exists to make this non-positive.
    pub objective_curvature: f64,
}

impl AssumptionReport {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.verdict.ok())
    }

    /// Every check except the curvature condition holds and the objective is
    /// concave at the state up to `tol`.
    pub fn holds_with_direct_concavity(&self, tol: f64) -> bool {
        self.checks.iter().all(|c| c.id == 8 || c.verdict.ok()) && self.objective_curvature <= tol
    }

    pub fn get(&self, id: u8) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.id == id)
    }
}

const GRID: usize = 33;

fn check(id: u8, name: &str, verdict: Verdict, value: f64, threshold: f64, note: impl Into<String>) -> AssumptionCheck {
    AssumptionCheck {
        id,
        name: name.to_string(),
        verdict,
        value,
        threshold,
        note: note.into(),
    }
}

/// Liabilities spanning `(0, hi]`.
fn liability_grid(hi: f64) -> Vec<f64> {
    (1..=GRID).map(|i| hi * i as f64 / GRID as f64).collect()
}

/// Evaluates the assumptions at `state`, read as the state right after the
/// decision: `state.l` is carried into the next step with `state.nbar` at stake.
pub fn check_assumptions(model: &ReturnModel, state: &SystemState, params: &SystemParams) -> AssumptionReport {
    let mut checks = Vec::with_capacity(11);
    let mean = model.mean();
    let x = state.x;
    let l = state.l;
    let nbar = state.nbar;

    checks.push(check(
        1,
        "returns form a submartingale",
        Verdict::from_bool(mean >= 1.0),
        mean,
        1.0,
        "expected one-step return",
    ));

    let continuous = model.validate().is_ok() && model.point_mass().is_none();
    checks.push(check(
        2,
        "return density exists and is a.s. continuous",
        Verdict::from_bool(continuous),
        f64::from(u8::from(continuous)),
        1.0,
        "",
    ));

    checks.push(check(
        3,
        "expected return bounded by r",
        Verdict::from_bool(mean <= params.r_bound),
        mean,
        params.r_bound,
        "",
    ));

    // Exhaustion price over the liabilities reachable at this collateral.
    let cap = collateral_cap(state, params).unwrap_or(l).max(l);
    let grid = liability_grid(cap.max(f64::MIN_POSITIVE));
    let c_max = if nbar > 0.0 {
        grid.iter()
            .filter_map(|&li| threshold_c(li, nbar, params).ok())
            .fold(f64::NEG_INFINITY, f64::max)
    } else {
        f64::NAN
    };
    checks.push(check(
        4,
        "exhaustion price bounded by u",
        Verdict::on_grid(c_max <= params.u_bound),
        c_max,
        params.u_bound,
        format!("maximum over {GRID} liabilities up to the collateral cap"),
    ));

    checks.push(check(
        5,
        "supply bounded below by v",
        Verdict::from_bool(state.supply >= params.v_floor),
        state.supply,
        params.v_floor,
        "",
    ));

    // A liquidation only shrinks supply, raising the price, so the lowest
    // repurchase price is the one at the carried supply.
    let worst_price = match params.demand_mode {
        DemandMode::PerfectlyElastic => params.alpha,
        _ => params.alpha * params.curve().price(state.supply),
    };
    checks.push(check(
        6,
        "liquidation repurchase price above one",
        Verdict::from_bool(worst_price > 1.0),
        worst_price,
        1.0,
        "fee-inclusive price at the carried supply",
    ));

    let band_mass = |li: f64| -> Option<f64> {
        let b = threshold_b(li, nbar, params.beta).ok()?;
        let c = threshold_c(li, nbar, params).ok()?;
        Some(model.mass(c / x, b / x))
    };
    let masses: Vec<Option<f64>> = grid.iter().map(|&li| band_mass(li)).collect();
    let monotone = masses.iter().all(Option::is_some)
        && masses
            .windows(2)
            .all(|w| w[1].unwrap() >= w[0].unwrap() * (1.0 - 1e-12) - 1e-300);
    let worst_drop = masses
        .windows(2)
        .filter_map(|w| Some(w[0]? - w[1]?))
        .fold(0.0, f64::max);
    checks.push(check(
        7,
        "partial-liquidation probability increasing in the liability",
        Verdict::on_grid(monotone),
        worst_drop,
        0.0,
        "largest decrease between adjacent grid liabilities",
    ));

    let c_now = if nbar > 0.0 {
        threshold_c(l, nbar, params).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    let gap = nbar * c_now - l;
    let curvature = if gap > 0.0 {
        params.alpha * params.demand * nbar * c_now / (2.0 * gap * gap)
    } else {
        f64::INFINITY
    };
    let sufficient = state.supply >= 27.0 / 46.0 * params.alpha * params.demand;
    checks.push(check(
        8,
        "liquidation-cost curvature bounded",
        Verdict::from_bool(curvature <= 2.0),
        curvature,
        2.0,
        if sufficient {
            "supply clears the sufficient level"
        } else {
            "supply below the sufficient level; direct inequality evaluated"
        },
    ));

    let p_band = band_mass(l).unwrap_or(0.0);
    checks.push(check(
        9,
        "strict concavity: positive drift or liquidation risk",
        Verdict::from_bool(mean > 0.0 || p_band > 0.0),
        mean,
        0.0,
        format!("partial-liquidation probability {p_band:e}"),
    ));

    let no_wipe = if nbar > 0.0 && c_now.is_finite() {
        model.sf(c_now / x)
    } else {
        0.0
    };
    checks.push(check(
        10,
        "no-wipeout probability at least 1/kappa",
        Verdict::from_bool(no_wipe >= 1.0 / params.kappa),
        no_wipe,
        1.0 / params.kappa,
        "",
    ));

    // A value within the integrator's absolute accuracy of zero is zero.
    let tol = params.numerics.quadrature.abs_tol;
    let (integral, verdict, note) = match liquidation_slope_integral(l, state, model, params) {
        Ok(v) => (
            v,
            Verdict::from_bool(v <= tol),
            format!("absolute integration tolerance {tol:e}"),
        ),
        Err(e) => (f64::NAN, Verdict::Fails, format!("integral unavailable: {e}")),
    };
    checks.push(check(
        11,
        "expected liquidation slope non-positive",
        verdict,
        integral,
        0.0,
        note,
    ));

    let objective_curvature = psi_derivatives(l, state, model, params)
        .map(|d| d.d2 * state.supply)
        .unwrap_or(f64::NAN);

    AssumptionReport {
        checks,
        curvature_sufficient_level: sufficient,
        objective_curvature,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SystemParams {
        SystemParams {
            demand: 100.0,
            alpha: 1.13,
            r_bound: 1.01,
            ..SystemParams::default()
        }
    }

    #[test]
    fn well_collateralized_state_satisfies_everything_but_the_curvature_bound() {
        let p = params();
        let m = ReturnModel::Lognormal { mu: 0.001, sigma: 0.05 };
        let s = SystemState::new(1.0, 100.0, 400.0, 400.0, &p).unwrap();
        let r = check_assumptions(&m, &s, &p);
        for c in r.checks.iter().filter(|c| c.id != 8) {
            assert!(c.verdict.ok(), "{c:?}");
        }
        assert!(r.curvature_sufficient_level);
        assert_eq!(r.get(8).unwrap().verdict, Verdict::Fails);
        assert!(r.objective_curvature < 0.0);
        assert!(r.holds_with_direct_concavity(1e-9));
    }

    /// `αD·y/(2(y − L)²)` at the exhaustion value never drops below 12 when
    /// the collateral factor is 3/2, whatever the liability.
    #[test]
    fn curvature_condition_minimum_is_twelve() {
        let p = SystemParams {
            demand: 1.0,
            alpha: 1.0,
            ..SystemParams::default()
        };
        let mut best = f64::INFINITY;
        for i in 1..20_000 {
            let l = i as f64 * 1e-3;
            let y = crate::model::exhaustion_value(l, &p).unwrap();
            best = best.min(y / (2.0 * (y - l) * (y - l)));
        }
        assert!((best - 12.0).abs() < 1e-6, "{best}");
    }

    #[test]
    fn negative_drift_fails_submartingale() {
        let p = params();
        let m = ReturnModel::Lognormal { mu: -0.05, sigma: 0.05 };
        let s = SystemState::new(1.0, 100.0, 400.0, 400.0, &p).unwrap();
        let r = check_assumptions(&m, &s, &p);
        assert_eq!(r.get(1).unwrap().verdict, Verdict::Fails);
        assert!(!r.all_hold());
    }

    #[test]
    fn low_supply_flags_sufficient_level_but_evaluates_directly() {
        let p = params();
        let m = ReturnModel::Lognormal { mu: 0.001, sigma: 0.05 };
        let s = SystemState::new(1.0, 30.0, 400.0, 400.0, &p).unwrap();
        let r = check_assumptions(&m, &s, &p);
        assert!(!r.curvature_sufficient_level);
        let a8 = r.get(8).unwrap();
        assert!(a8.value.is_finite());
        assert_eq!(a8.verdict, Verdict::from_bool(a8.value <= 2.0));
    }
}
