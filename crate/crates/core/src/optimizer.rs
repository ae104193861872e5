//! The speculator's one-period problem: expected next-step equity as a
//! function of the liability it carries forward, its derivatives, the
//! constrained maximizer, the bounds on the decision, and the sensitivity of
//! the decision to the ETH price and collateral.
//!
//! All functions take the system as seen at the decision: `state.l`,
//! `state.supply` and `state.n` are what the speculator carries in, and
//! `state.nbar` is the collateral that will be at stake over the next step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    exhaustion, CollateralMode, DemandMode, Exhaustion, LiquidationEffect, SpeculatorMode, SystemParams, SystemState,
};
use crate::returns::{expectation_of, Integrand, LiquidationTerm, ReturnModel};

/// Which constraint, if any, determined the decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    Interior,
    /// Post-decision collateral constraint.
    CollateralCap,
    /// The liability may not exceed what remains after a forced liquidation.
    ForcedLiquidationCap,
    /// Repurchase capacity.
    LowerBound,
}

impl Binding {
    pub fn is_cap(self) -> bool {
        matches!(self, Binding::CollateralCap | Binding::ForcedLiquidationCap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionResult {
    pub l_star: f64,
    pub supply_star: f64,
    /// `l_star` minus the liability carried into the decision.
    pub delta: f64,
    pub binding: Binding,
    pub psi_at_star: f64,
    /// Objective slope at the decision.
    pub foc_residual: f64,
    /// Set when the objective was not concave at the root and a
    /// golden-section search on the objective replaced it.
    pub fallback: bool,
}

/// Decision sensitivities from the implicit function theorem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPair {
    /// Per unit of the realized return that produced `state.x`.
    pub dh_drho: f64,
    /// Per ETH of collateral at stake.
    pub dh_dn: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiDerivatives {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Everything about the next step that depends on the candidate liability.
struct Geometry {
    l: f64,
    w: f64,
    ex: Exhaustion,
    k_c: f64,
    k_b: f64,
    effect: LiquidationEffect,
    beta: f64,
}

impl Geometry {
    fn new(l: f64, w: f64, params: &SystemParams) -> Result<Self> {
        let ex = exhaustion(l, params)?;
        let (k_c, k_b) = if w > 0.0 {
            (ex.value / w, params.beta * l / w)
        } else {
            (f64::INFINITY, f64::INFINITY)
        };
        Ok(Self {
            l,
            w,
            ex,
            k_c,
            k_b: k_b.max(k_c),
            effect: LiquidationEffect::new(l, params),
            beta: params.beta,
        })
    }

    /// Equity just above the exhaustion price: collateral gone, liability left.
    fn jump(&self) -> f64 {
        (self.l - self.ex.value) / (self.beta - 1.0)
    }
}

/// Evaluation context for one decision.
struct Objective<'a> {
    state: &'a SystemState,
    model: &'a ReturnModel,
    params: &'a SystemParams,
    mean: f64,
}

impl<'a> Objective<'a> {
    fn new(state: &'a SystemState, model: &'a ReturnModel, params: &'a SystemParams) -> Self {
        Self {
            state,
            model,
            params,
            mean: model.mean(),
        }
    }

    /// Dollars raised (positive) or spent by moving the liability to `l`,
    /// with its first two derivatives.
    fn proceeds(&self, l: f64) -> (f64, f64, f64) {
        let curve = self.params.curve();
        let s = self.params.zeta + l;
        let dl = l - self.state.l;
        let (p, p1, p2) = (curve.price(s), curve.d1(s), curve.d2(s));
        (dl * p, p + dl * p1, 2.0 * p1 + dl * p2)
    }

    fn collateral_value(&self, l: f64) -> f64 {
        match self.params.collateral_mode {
            CollateralMode::Lagged => self.state.nbar * self.state.x,
            CollateralMode::Concurrent => self.state.n * self.state.x + self.proceeds(l).0,
        }
    }

    fn liquidation(&self, g: &Geometry, term: LiquidationTerm, scale: f64) -> Result<f64> {
        if !(g.k_b > g.k_c) {
            return Ok(0.0);
        }
        let mass = self.model.mass(g.k_c, g.k_b);
        if mass == 0.0 {
            return Ok(0.0);
        }
        let integrand = Integrand::Liquidation {
            term,
            effect: g.effect,
            collateral: g.w,
        };
        let spec = &self.params.numerics.quadrature;
        let tol = spec.abs_tol * scale;
        let (fc, fb) = (integrand.eval(g.k_c), integrand.eval(g.k_b));
        let fm = integrand.eval(0.5 * (g.k_c + g.k_b));
        let spread = fc.abs().max(fb.abs()).max(fm.abs());
        if mass * spread <= 1e-3 * tol {
            return Ok(mass * fm);
        }
        Ok(expectation_of(self.model, g.k_c, g.k_b, |z| integrand.eval(z), spec, tol)?.value)
    }

    /// Expected equity at a fixed collateral value, excluding the proceeds term.
    fn value_at(&self, g: &Geometry) -> Result<f64> {
        let m = self.model;
        let supply = self.params.zeta + g.l;
        Ok(g.w * m.first_moment(g.k_c, f64::INFINITY) - g.l * m.sf(g.k_c)
            + self.liquidation(g, LiquidationTerm::Value, supply)?)
    }

    /// Liability derivative of [`Self::value_at`] at fixed collateral value.
    fn slope_at(&self, g: &Geometry) -> Result<f64> {
        let m = self.model;
        let mut d = -m.sf(g.k_c) + self.liquidation(g, LiquidationTerm::LiabilitySlope, 1.0)?;
        if g.w > 0.0 && g.k_c.is_finite() {
            d -= g.jump() * m.pdf(g.k_c) * g.ex.d1 / g.w;
        }
        Ok(d)
    }

    /// Second liability derivative of [`Self::value_at`] at fixed collateral value.
    fn curvature_at(&self, g: &Geometry) -> Result<f64> {
        if !(g.w > 0.0 && g.k_c.is_finite()) {
            return Ok(0.0);
        }
        let m = self.model;
        let supply = self.params.zeta + g.l;
        let (gc, gb, gc1) = (m.pdf(g.k_c), m.pdf(g.k_b), m.pdf_d1(g.k_c));
        let kc1 = g.ex.d1 / g.w;
        let mut d = gc * kc1;
        if g.k_b > g.k_c {
            d += g.effect.d_liability(g.beta * g.l) * gb * g.beta / g.w;
            d -= g.effect.d_liability(g.ex.value) * gc * kc1;
        }
        d += self.liquidation(g, LiquidationTerm::LiabilityCurvature, 1.0 / supply)?;
        let jump = g.jump();
        let jump1 = (1.0 - g.ex.d1) / (g.beta - 1.0);
        d -= jump1 * gc * kc1 + jump * gc1 * kc1 * kc1 + jump * gc * g.ex.d2 / g.w;
        Ok(d)
    }

    /// Collateral-value derivative of [`Self::value_at`] at fixed liability.
    fn collateral_slope_at(&self, g: &Geometry) -> Result<f64> {
        if !(g.w > 0.0) {
            return Ok(0.0);
        }
        let m = self.model;
        let mut d =
            m.first_moment(g.k_c, f64::INFINITY) + self.liquidation(g, LiquidationTerm::CollateralSlope, 1.0)?;
        if g.k_c.is_finite() {
            d += g.jump() * m.pdf(g.k_c) * g.k_c / g.w;
        }
        Ok(d)
    }

    /// Mixed liability/collateral-value derivative of [`Self::value_at`].
    fn cross_at(&self, g: &Geometry) -> Result<f64> {
        if !(g.w > 0.0 && g.k_c.is_finite()) {
            return Ok(0.0);
        }
        let m = self.model;
        let (gc, gb, gc1) = (m.pdf(g.k_c), m.pdf(g.k_b), m.pdf_d1(g.k_c));
        let w = g.w;
        let mut d = -gc * g.k_c / w;
        if g.k_b > g.k_c {
            d -= g.effect.d_liability(g.beta * g.l) * gb * g.k_b / w;
            d += g.effect.d_liability(g.ex.value) * gc * g.k_c / w;
        }
        d += self.liquidation(g, LiquidationTerm::CrossSlope, 1.0 / w)?;
        d += g.jump() * g.ex.d1 * (gc1 * g.k_c + gc) / (w * w);
        Ok(d)
    }

    fn geometry(&self, l: f64) -> Result<Geometry> {
        Geometry::new(l, self.collateral_value(l), self.params)
    }

    fn value(&self, l: f64) -> Result<f64> {
        let g = self.geometry(l)?;
        let core = self.value_at(&g)?;
        Ok(match self.params.collateral_mode {
            CollateralMode::Lagged => self.mean * self.proceeds(l).0 + core,
            CollateralMode::Concurrent => core,
        })
    }

    fn d1(&self, l: f64) -> Result<f64> {
        let g = self.geometry(l)?;
        let (_, t1, _) = self.proceeds(l);
        Ok(match self.params.collateral_mode {
            CollateralMode::Lagged => self.mean * t1 + self.slope_at(&g)?,
            CollateralMode::Concurrent => self.slope_at(&g)? + t1 * self.collateral_slope_at(&g)?,
        })
    }

    fn d2(&self, l: f64) -> Result<f64> {
        match self.params.collateral_mode {
            CollateralMode::Lagged => {
                let g = self.geometry(l)?;
                let (_, _, t2) = self.proceeds(l);
                Ok(self.mean * t2 + self.curvature_at(&g)?)
            }
            CollateralMode::Concurrent => {
                let h = 1e-5 * (self.params.zeta + l).max(self.params.v_floor);
                Ok((self.d1(l + h)? - self.d1(l - h)?) / (2.0 * h))
            }
        }
    }
}

fn check_decision_state(state: &SystemState) -> Result<()> {
    if state.is_halted() {
        return Err(Error::Precondition(format!(
            "decision on a halted state ({})",
            state.status.as_str()
        )));
    }
    Ok(())
}

/// Expected next-step equity when the liability is moved to `l`.
pub fn psi(l: f64, state: &SystemState, model: &ReturnModel, params: &SystemParams) -> Result<f64> {
    Objective::new(state, model, params).value(l)
}

/// Slope of [`psi`] in the liability.
pub fn psi_prime(l: f64, state: &SystemState, model: &ReturnModel, params: &SystemParams) -> Result<f64> {
    Objective::new(state, model, params).d1(l)
}

/// Curvature of [`psi`]; a positive value beyond tolerance is reported as an error.
pub fn psi_second(l: f64, state: &SystemState, model: &ReturnModel, params: &SystemParams) -> Result<f64> {
    let v = Objective::new(state, model, params).d2(l)?;
    let supply = (params.zeta + l).max(params.v_floor);
    if v * supply > params.numerics.concavity_tol {
        return Err(Error::ConcavityViolation { value: v });
    }
    Ok(v)
}

/// Value, slope and curvature of [`psi`] without the concavity check.
pub fn psi_derivatives(
    l: f64,
    state: &SystemState,
    model: &ReturnModel,
    params: &SystemParams,
) -> Result<PsiDerivatives> {
    let o = Objective::new(state, model, params);
    Ok(PsiDerivatives {
        value: o.value(l)?,
        d1: o.d1(l)?,
        d2: o.d2(l)?,
    })
}

/// Most negative liability change the speculator can finance by selling its
/// position at the post-trade clearing price.
pub fn delta_lower_bound(state: &SystemState, params: &SystemParams) -> Result<f64> {
    let equity = state.n * state.x - state.l;
    let supply = state.supply;
    match params.demand_mode {
        DemandMode::UnitElastic => {
            let b = params.demand + equity - supply;
            let disc = b * b + 4.0 * equity * supply;
            if disc < 0.0 {
                return Err(Error::Insolvent(format!(
                    "repurchase balance has no real solution (discriminant {disc})"
                )));
            }
            let root = disc.sqrt();
            Ok(if b > 0.0 {
                -2.0 * equity * supply / (b + root)
            } else {
                0.5 * (b - root)
            })
        }
        DemandMode::PerfectlyElastic => {
            if equity < 0.0 {
                return Err(Error::Insolvent(format!("negative equity {equity}")));
            }
            Ok(-state.l)
        }
        DemandMode::ConstantElasticity => {
            if equity < 0.0 {
                return Err(Error::Insolvent(format!("negative equity {equity}")));
            }
            let curve = params.curve();
            let balance = |d: f64| {
                let s = supply + d;
                if s <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    d * (curve.price(s) - 1.0) + equity
                }
            };
            let floor = -state.l;
            if balance(floor) >= 0.0 {
                return Ok(floor);
            }
            let (mut a, mut b) = (floor, 0.0);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if balance(m) >= 0.0 {
                    b = m;
                } else {
                    a = m;
                }
                if b - a <= 1e-15 * supply {
                    break;
                }
            }
            Ok(b)
        }
    }
}

/// Feasible liabilities for the decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibleRange {
    pub lo: f64,
    pub hi: f64,
    pub hi_binding: Binding,
}

/// Largest liability keeping the collateral constraint after the decision.
pub fn collateral_cap(state: &SystemState, params: &SystemParams) -> Result<f64> {
    let beta = params.beta;
    match params.collateral_mode {
        CollateralMode::Lagged => Ok(state.nbar * state.x / beta),
        CollateralMode::Concurrent => {
            let base = state.n * state.x;
            match params.demand_mode {
                DemandMode::PerfectlyElastic => Ok((base - state.l) / (beta - 1.0)),
                DemandMode::UnitElastic => {
                    let d = params.demand;
                    let zeta = params.zeta;
                    let slack = |l: f64| base + (l - state.l) * d / (zeta + l) - beta * l;
                    let top = ((d * state.supply / beta).sqrt() - zeta).max(0.0);
                    if slack(top) < 0.0 {
                        return Err(Error::Insolvent(
                            "no liability satisfies the concurrent collateral constraint".into(),
                        ));
                    }
                    let (mut a, mut b) = (top, top + 2.0 * (base + d) / beta + 1.0);
                    for _ in 0..300 {
                        let m = 0.5 * (a + b);
                        if slack(m) >= 0.0 {
                            a = m;
                        } else {
                            b = m;
                        }
                        if b - a <= 1e-15 * b {
                            break;
                        }
                    }
                    Ok(a)
                }
                DemandMode::ConstantElasticity => Err(Error::Precondition(
                    "concurrent collateral is not supported with constant-elasticity demand".into(),
                )),
            }
        }
    }
}

/// Feasible interval: repurchase capacity and the supply floor below, the
/// collateral constraint and any forced-liquidation cap above.
pub fn feasible_range(state: &SystemState, params: &SystemParams, liability_cap: Option<f64>) -> Result<FeasibleRange> {
    let dlb = delta_lower_bound(state, params)?;
    let lo = (state.l + dlb).max(params.v_floor - params.zeta).max(0.0);
    let mut hi = collateral_cap(state, params)?;
    let mut hi_binding = Binding::CollateralCap;
    if let Some(cap) = liability_cap {
        if cap < hi {
            hi = cap;
            hi_binding = Binding::ForcedLiquidationCap;
        }
    }
    let slack = 1e-12 * state.supply.max(params.v_floor);
    if lo > hi + slack {
        return Err(Error::Insolvent(format!(
            "lowest reachable liability {lo} exceeds the cap {hi}"
        )));
    }
    Ok(FeasibleRange {
        lo: lo.min(hi),
        hi,
        hi_binding,
    })
}

/// Bracketed root of `f` on `[a, b]` with `f(a)`, `f(b)` of opposite sign,
/// by Brent's method; the returned point is within `tol` of a sign change.
fn brent<F>(mut f: F, mut a: f64, mut b: f64, mut fa: f64, mut fb: f64, tol: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..300 {
        if (fb > 0.0) == (fc > 0.0) && fb != 0.0 && fc != 0.0 {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Ok((b, fb));
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let q0 = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * q0 * (q0 - r) - (b - a) * (r - 1.0));
                q = (q0 - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * xm * q - (tol1 * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b)?;
    }
    Err(Error::Solver("bracketed root search did not converge".into()))
}

/// Maximizer of a unimodal `f` on `[a, b]` by golden-section search.
fn golden_max<F>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while b - a > tol {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2)?;
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1)?;
        }
    }
    let mid = 0.5 * (a + b);
    let (fa, fb, fm) = (f(a)?, f(b)?, f(mid)?);
    Ok(if fa > fm && fa >= fb {
        a
    } else if fb > fm {
        b
    } else {
        mid
    })
}

/// The speculator's decision with no forced-liquidation cap.
pub fn solve_supply(state: &SystemState, model: &ReturnModel, params: &SystemParams) -> Result<DecisionResult> {
    solve_supply_with(state, model, params, None, None)
}

/// The speculator's decision, with an optional cap on the liability (after a
/// forced liquidation) and an optional starting guess for the root search.
pub fn solve_supply_with(
    state: &SystemState,
    model: &ReturnModel,
    params: &SystemParams,
    liability_cap: Option<f64>,
    hint: Option<f64>,
) -> Result<DecisionResult> {
    solve(state, model, params, liability_cap, hint, true)
}

/// Root search behind [`solve_supply_with`]. Without `with_value` the
/// objective at the optimum is not integrated and is reported as NaN.
pub(crate) fn solve(
    state: &SystemState,
    model: &ReturnModel,
    params: &SystemParams,
    liability_cap: Option<f64>,
    hint: Option<f64>,
    with_value: bool,
) -> Result<DecisionResult> {
    check_decision_state(state)?;
    let range = feasible_range(state, params, liability_cap)?;
    let obj = Objective::new(state, model, params);
    let finish = |l: f64, binding: Binding, slope: Option<f64>, fallback: bool| -> Result<DecisionResult> {
        let foc_residual = match slope {
            Some(s) => s,
            None => obj.d1(l)?,
        };
        Ok(DecisionResult {
            l_star: l,
            supply_star: params.zeta + l,
            delta: l - state.l,
            binding,
            psi_at_star: if with_value { obj.value(l)? } else { f64::NAN },
            foc_residual,
            fallback,
        })
    };

    if params.speculator_mode == SpeculatorMode::UnlimitedDepth {
        let target = (params.gamma_marginal * params.demand * state.supply * obj.mean).sqrt() - params.zeta;
        let (l, binding) = if target >= range.hi {
            (range.hi, range.hi_binding)
        } else if target <= range.lo {
            (range.lo, Binding::LowerBound)
        } else {
            (target, Binding::Interior)
        };
        let s = params.zeta + l;
        let marginal = params.gamma_marginal * params.demand * state.supply * obj.mean / (s * s) - 1.0;
        return finish(l, binding, Some(marginal), false);
    }

    let (lo, hi) = (range.lo, range.hi);
    let tol = params.numerics.foc_rel_tol * state.supply.max(params.v_floor);
    if hi - lo <= tol {
        return finish(hi, range.hi_binding, None, false);
    }
    let f = |l: f64| obj.d1(l);

    let guess = hint.unwrap_or_else(|| match params.demand_mode {
        DemandMode::UnitElastic => (params.demand * state.supply * obj.mean).sqrt() - params.zeta,
        _ => state.l,
    });
    let step0 = if hint.is_some() { 1e-3 } else { 1e-2 } * guess.abs().max(tol);

    let (a, fa, b, fb) = if guess > lo && guess < hi {
        let fg = f(guess)?;
        if fg == 0.0 {
            return finish(guess, Binding::Interior, Some(fg), false);
        }
        let right = fg > 0.0;
        let mut step = step0;
        let (mut near, mut f_near) = (guess, fg);
        loop {
            let far = if right {
                (near + step).min(hi)
            } else {
                (near - step).max(lo)
            };
            let f_far = f(far)?;
            let crossed = if right { f_far <= 0.0 } else { f_far >= 0.0 };
            if crossed {
                break if right {
                    (near, f_near, far, f_far)
                } else {
                    (far, f_far, near, f_near)
                };
            }
            if right && far >= hi {
                return finish(hi, range.hi_binding, Some(f_far), false);
            }
            if !right && far <= lo {
                return finish(lo, Binding::LowerBound, Some(f_far), false);
            }
            near = far;
            f_near = f_far;
            step *= 4.0;
        }
    } else {
        let f_hi = f(hi)?;
        if f_hi >= 0.0 {
            return finish(hi, range.hi_binding, Some(f_hi), false);
        }
        let f_lo = f(lo)?;
        if f_lo <= 0.0 {
            return finish(lo, Binding::LowerBound, Some(f_lo), false);
        }
        (lo, f_lo, hi, f_hi)
    };
    if fa == 0.0 {
        return finish(a, Binding::Interior, Some(0.0), false);
    }
    if fb == 0.0 && b >= hi {
        return finish(hi, range.hi_binding, Some(0.0), false);
    }
    let (root, f_root) = brent(f, a, b, fa, fb, tol)?;

    let curvature = obj.d2(root)?;
    if curvature * (params.zeta + root) > params.numerics.concavity_tol {
        let l = golden_max(|l| obj.value(l), lo, hi, tol)?;
        let binding = if l >= hi - tol {
            range.hi_binding
        } else if l <= lo + tol {
            Binding::LowerBound
        } else {
            Binding::Interior
        };
        return finish(l, binding, None, true);
    }
    finish(root, Binding::Interior, Some(f_root), false)
}

/// Which sufficient condition established the supply upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpperBoundCondition {
    /// The liquidation terms are non-positive and the no-wipeout probability is at least 1/κ.
    NonPositiveLiquidationSlope,
    /// The no-liquidation probability outweighs the worst-case liquidation slope by 1/κ.
    NoLiquidationDominates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupplyUpperBound {
    /// Bound on total supply.
    pub bound: f64,
    pub condition: UpperBoundCondition,
}

/// Upper bound on the post-decision supply, `sqrt(κ · supply · D · E[R])`.
///
/// The bound follows from the first-order condition once either sufficient
/// condition holds at the decision, so the conditions are evaluated at the
/// solver's choice. Both include the wipeout-boundary term of the objective
/// slope, which is non-negative.
pub fn supply_upper_bound(state: &SystemState, model: &ReturnModel, params: &SystemParams) -> Result<SupplyUpperBound> {
    check_decision_state(state)?;
    if params.demand_mode != DemandMode::UnitElastic || params.collateral_mode != CollateralMode::Lagged {
        return Err(Error::BoundInapplicable(
            "the supply bound is derived for unit-elastic demand with lagged collateral".into(),
        ));
    }
    let obj = Objective::new(state, model, params);
    let bound = (params.kappa * state.supply * params.demand * obj.mean).sqrt();
    let dec = solve_supply(state, model, params)?;
    if dec.binding == Binding::LowerBound && dec.supply_star > bound {
        return Err(Error::BoundInapplicable(
            "the repurchase capacity alone forces supply above the bound".into(),
        ));
    }
    let g = obj.geometry(dec.l_star)?;
    let jump = if g.w > 0.0 && g.k_c.is_finite() {
        -g.jump() * model.pdf(g.k_c) * g.ex.d1 / g.w
    } else {
        0.0
    };
    let inv_kappa = 1.0 / params.kappa;
    let excess_slope = params.beta / (params.beta - 1.0) - 1.0;
    let no_wipe = model.sf(g.k_c);
    let p_a = model.sf(g.k_b);
    let p_b = model.mass(g.k_c, g.k_b);
    let liq_slope = obj.liquidation(&g, LiquidationTerm::LiabilitySlope, 1.0)?;
    let condition = if liq_slope + jump <= 0.0 && no_wipe >= inv_kappa {
        UpperBoundCondition::NonPositiveLiquidationSlope
    } else if p_a - excess_slope * p_b - jump >= inv_kappa {
        UpperBoundCondition::NoLiquidationDominates
    } else {
        return Err(Error::BoundInapplicable(
            "neither sufficient condition holds at the decision".into(),
        ));
    };
    Ok(SupplyUpperBound { bound, condition })
}

/// Sensitivities of the optimal liability to the realized return and to the
/// collateral at stake, by the implicit function theorem. `prev_x` is the ETH
/// price before the return that produced `state.x`.
pub fn h_sensitivities(
    state: &SystemState,
    model: &ReturnModel,
    params: &SystemParams,
    prev_x: f64,
) -> Result<SensitivityPair> {
    if params.collateral_mode != CollateralMode::Lagged {
        return Err(Error::SensitivityUndefined(
            "implemented for lagged collateral only".into(),
        ));
    }
    let dec = solve_supply(state, model, params)?;
    if params.speculator_mode == SpeculatorMode::UnlimitedDepth {
        return Ok(SensitivityPair {
            dh_drho: 0.0,
            dh_dn: 0.0,
        });
    }
    if dec.binding != Binding::Interior || dec.fallback {
        return Err(Error::SensitivityUndefined(format!(
            "decision is not an interior concave optimum ({:?})",
            dec.binding
        )));
    }
    let obj = Objective::new(state, model, params);
    let g = obj.geometry(dec.l_star)?;
    let curvature = obj.d2(dec.l_star)?;
    if !(curvature < 0.0) {
        return Err(Error::SensitivityUndefined(format!(
            "objective curvature {curvature:e} is not negative"
        )));
    }
    let dh_dw = -obj.cross_at(&g)? / curvature;
    Ok(SensitivityPair {
        dh_drho: prev_x * state.nbar * dh_dw,
        dh_dn: state.x * dh_dw,
    })
}

/// Expected liability slope of the partial-liquidation effect at liability
/// `l`, integrated over the partial-liquidation band of next-step returns.
pub fn liquidation_slope_integral(
    l: f64,
    state: &SystemState,
    model: &ReturnModel,
    params: &SystemParams,
) -> Result<f64> {
    let obj = Objective::new(state, model, params);
    let g = obj.geometry(l)?;
    obj.liquidation(&g, LiquidationTerm::LiabilitySlope, 1.0)
}

/// Collateral-value derivative of the objective slope; exposed for tests of
/// the sensitivity formulas.
pub fn psi_cross_collateral(l: f64, state: &SystemState, model: &ReturnModel, params: &SystemParams) -> Result<f64> {
    let obj = Objective::new(state, model, params);
    obj.cross_at(&obj.geometry(l)?)
}

/// Collateral-value derivative of the objective at fixed liability.
pub fn psi_collateral_slope(l: f64, state: &SystemState, model: &ReturnModel, params: &SystemParams) -> Result<f64> {
    let obj = Objective::new(state, model, params);
    obj.collateral_slope_at(&obj.geometry(l)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DemandMode;

    fn params() -> SystemParams {
        SystemParams {
            alpha: 1.13,
            demand: 100.0,
            ..SystemParams::default()
        }
    }

    fn state(x: f64, l: f64, n: f64, p: &SystemParams) -> SystemState {
        SystemState::new(x, l, n, n, p).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn no_liquidation_objective_examples() {
        let p = params();
        let m = ReturnModel::Uniform { lo: 0.9, hi: 1.1 };
        let s = state(1.0, 100.0, 300.0, &p);
        assert!(rel(psi(100.0, &s, &m, &p).unwrap(), 200.0) < 1e-12);
        let m = ReturnModel::Uniform { lo: 1.0, hi: 1.2 };
        assert!(rel(psi(110.0, &s, &m, &p).unwrap(), 230.0) < 1e-12);
        let d1 = psi_prime(110.0, &s, &m, &p).unwrap();
        assert!(rel(d1, 100.0 * 100.0 * 1.1 / (110.0 * 110.0) - 1.0) < 1e-12);
        let d2 = psi_second(110.0, &s, &m, &p).unwrap();
        assert!(rel(d2, -2.0 * 100.0 * 100.0 * 1.1 / 110f64.powi(3)) < 1e-12);
    }

    #[test]
    fn perfectly_elastic_speculator_is_indifferent() {
        let p = SystemParams {
            demand_mode: DemandMode::PerfectlyElastic,
            ..params()
        };
        let m = ReturnModel::Uniform { lo: 0.9, hi: 1.1 };
        let s = state(1.0, 100.0, 300.0, &p);
        for l in [50.0, 100.0, 150.0] {
            assert!(psi_prime(l, &s, &m, &p).unwrap().abs() < 1e-14);
        }
    }

    #[test]
    fn flat_return_without_liquidation_has_zero_curvature() {
        let p = SystemParams {
            demand_mode: DemandMode::PerfectlyElastic,
            ..params()
        };
        let m = ReturnModel::Uniform { lo: 0.9, hi: 1.1 };
        let s = state(1.0, 100.0, 300.0, &p);
        assert_eq!(psi_derivatives(120.0, &s, &m, &p).unwrap().d2, 0.0);
    }

    #[test]
    fn solve_supply_examples() {
        let p = SystemParams { kappa: 1.0, ..params() };
        let m = ReturnModel::Uniform { lo: 1.11, hi: 1.31 };
        let s = state(1.0, 100.0, 1000.0, &p);
        let d = solve_supply(&s, &m, &p).unwrap();
        assert!(rel(d.l_star, 110.0) < 1e-9, "{d:?}");
        assert_eq!(d.binding, Binding::Interior);
        let ub = supply_upper_bound(&s, &m, &p).unwrap();
        assert!(rel(ub.bound, 110.0) < 1e-12);

        let u = SystemParams {
            speculator_mode: SpeculatorMode::UnlimitedDepth,
            ..p
        };
        assert!(rel(solve_supply(&s, &m, &u).unwrap().l_star, 110.0) < 1e-12);
    }

    #[test]
    fn upper_bound_with_larger_kappa() {
        let p = SystemParams {
            kappa: 1.21,
            ..params()
        };
        let m = ReturnModel::Uniform { lo: 0.9, hi: 1.1 };
        let s = state(1.0, 100.0, 1000.0, &p);
        assert!(rel(supply_upper_bound(&s, &m, &p).unwrap().bound, 110.0) < 1e-12);
    }

    #[test]
    fn delta_lower_bound_examples() {
        let p = params();
        let s = SystemState::new(100.0, 100.0, 2.0, 2.0, &p).unwrap();
        let d = delta_lower_bound(&s, &p).unwrap();
        assert!((d + 61.803).abs() < 1e-3);
        let balance = d * 100.0 / (100.0 + d) + 200.0 - 100.0 - d;
        assert!(balance.abs() < 1e-10);
        let s = SystemState::new(1.0, 100.0, 100.0, 100.0, &p).unwrap();
        assert_eq!(delta_lower_bound(&s, &p).unwrap(), 0.0);
        let s = SystemState::new(1.0, 200.0, 10.0, 10.0, &p).unwrap();
        assert!(matches!(delta_lower_bound(&s, &p), Err(Error::Insolvent(_))));
    }

    #[test]
    fn forced_liquidation_cap_binds() {
        let p = SystemParams { alpha: 1.0, ..params() };
        let m = ReturnModel::lognormal_with_mean(1.001, 0.05);
        let s = SystemState::new(2.2, 64.0, 60.0, 60.0, &p).unwrap();
        let d = solve_supply_with(&s, &m, &p, Some(64.0), None).unwrap();
        assert_eq!(d.binding, Binding::ForcedLiquidationCap);
        assert_eq!(d.l_star, 64.0);
    }

    #[test]
    fn brent_finds_simple_roots() {
        let (r, _) = brent(|x| Ok(x * x - 2.0), 0.0, 2.0, -2.0, 2.0, 1e-14).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-13);
        let (r, _) = brent(|x| Ok((x - 0.3f64).powi(3)), 0.0, 1.0, -0.027, 0.343, 1e-12).unwrap();
        assert!((r - 0.3).abs() < 1e-6);
    }

    #[test]
    fn golden_section_finds_maximum() {
        let x = golden_max(|x| Ok(-(x - 0.7) * (x - 0.7)), 0.0, 2.0, 1e-10).unwrap();
        assert!((x - 0.7).abs() < 1e-8);
    }
}
