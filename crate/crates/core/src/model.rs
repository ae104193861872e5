//! Deterministic algebra of the collateralized stablecoin: parameters, the
//! per-step state, the clearing price, the liquidation thresholds and the
//! forced-liquidation mechanics.
//!
//! Units follow one convention throughout: ETH prices `x` are dollars per ETH,
//! liabilities and supplies are stablecoin units, positions are ETH, and the
//! stablecoin price `z` is dollars per stablecoin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::QuadratureSpec;

/// Shape of the stablecoin demand curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DemandMode {
    /// Constant dollar demand: price = D / supply.
    #[default]
    UnitElastic,
    /// Demand absorbs any quantity at $1.
    PerfectlyElastic,
    /// price = (q / supply)^(1/gamma).
    ConstantElasticity,
}

/// How supply is set each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpeculatorMode {
    /// One risk-neutral speculator maximizing expected next-step equity.
    #[default]
    Single,
    /// A deep pool of marginal speculators; supply follows a closed form.
    UnlimitedDepth,
}

/// Which position backs the liability during the next step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CollateralMode {
    /// Collateral at stake is the position held before the current decision.
    #[default]
    Lagged,
    /// Collateral at stake includes the proceeds of the current decision.
    Concurrent,
}

/// Solver and integration tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub quadrature: QuadratureSpec,
    /// First-order-condition bracket width, relative to the incoming supply.
    pub foc_rel_tol: f64,
    /// Relative band applied to the stop detectors so solver noise cannot trigger them.
    pub detector_rel_tol: f64,
    /// Largest second derivative (scaled by supply) still treated as concave.
    pub concavity_tol: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            quadrature: QuadratureSpec::default(),
            foc_rel_tol: 1e-9,
            detector_rel_tol: 1e-7,
            concavity_tol: 1e-9,
        }
    }
}

/// All model constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemParams {
    /// Dollar demand level D.
    pub demand: f64,
    /// Collateral factor, > 1.
    pub beta: f64,
    /// Liquidation fee multiple, >= 1.
    pub alpha: f64,
    /// Supply held outside the speculator.
    pub zeta: f64,
    /// Inverse lower bound on the no-wipeout probability.
    pub kappa: f64,
    /// Upper bound on the one-step conditional expected return.
    pub r_bound: f64,
    /// Upper bound on the exhaustion threshold.
    pub u_bound: f64,
    /// Supply floor.
    pub v_floor: f64,
    /// Price elasticity for constant-elasticity demand.
    pub elasticity_gamma: f64,
    /// Quantity demanded at price 1 for constant-elasticity demand.
    pub q_unit: f64,
    pub demand_mode: DemandMode,
    pub speculator_mode: SpeculatorMode,
    pub collateral_mode: CollateralMode,
    /// Cost factor of the marginal speculator in unlimited-depth mode.
    pub gamma_marginal: f64,
    pub numerics: Numerics,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            demand: 100.0,
            beta: 1.5,
            alpha: 1.13,
            zeta: 0.0,
            kappa: 1.0 / 0.999,
            r_bound: 1.5f64.powf(1.0 / 365.0),
            u_bound: 1e6,
            v_floor: 1e-6,
            elasticity_gamma: 1.0,
            q_unit: 100.0,
            demand_mode: DemandMode::UnitElastic,
            speculator_mode: SpeculatorMode::Single,
            collateral_mode: CollateralMode::Lagged,
            gamma_marginal: 1.0,
            numerics: Numerics::default(),
        }
    }
}

fn require(ok: bool, field: &'static str, constraint: &'static str, value: f64) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            field,
            constraint,
            value,
        })
    }
}

impl SystemParams {
    /// Checks every parameter invariant, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        require(
            self.demand.is_finite() && self.demand >= 0.0,
            "demand",
            "D >= 0",
            self.demand,
        )?;
        require(self.beta.is_finite() && self.beta > 1.0, "beta", "β > 1", self.beta)?;
        require(
            self.alpha.is_finite() && self.alpha >= 1.0,
            "alpha",
            "α >= 1",
            self.alpha,
        )?;
        require(self.zeta.is_finite() && self.zeta >= 0.0, "zeta", "ζ >= 0", self.zeta)?;
        require(
            self.kappa.is_finite() && self.kappa >= 1.0,
            "kappa",
            "κ >= 1",
            self.kappa,
        )?;
        require(
            self.r_bound.is_finite() && self.r_bound > 0.0,
            "r_bound",
            "r > 0",
            self.r_bound,
        )?;
        require(self.u_bound > 0.0, "u_bound", "u > 0", self.u_bound)?;
        require(
            self.v_floor.is_finite() && self.v_floor > 0.0,
            "v_floor",
            "v > 0",
            self.v_floor,
        )?;
        require(
            self.elasticity_gamma.is_finite() && self.elasticity_gamma > 0.0,
            "elasticity_gamma",
            "γ > 0",
            self.elasticity_gamma,
        )?;
        require(
            self.q_unit.is_finite() && self.q_unit > 0.0,
            "q_unit",
            "q > 0",
            self.q_unit,
        )?;
        require(
            self.gamma_marginal.is_finite() && self.gamma_marginal > 0.0,
            "gamma_marginal",
            "marginal cost factor > 0",
            self.gamma_marginal,
        )?;
        if self.demand_mode == DemandMode::UnitElastic {
            require(
                self.elasticity_gamma == 1.0,
                "elasticity_gamma",
                "γ = 1 under unit-elastic demand",
                self.elasticity_gamma,
            )?;
        }
        if self.speculator_mode == SpeculatorMode::UnlimitedDepth {
            require(
                self.demand_mode == DemandMode::UnitElastic,
                "speculator_mode",
                "unlimited depth requires unit-elastic demand",
                f64::NAN,
            )?;
        }
        if self.collateral_mode == CollateralMode::Concurrent {
            require(
                self.demand_mode != DemandMode::ConstantElasticity,
                "collateral_mode",
                "concurrent collateral supports unit-elastic or perfectly elastic demand",
                f64::NAN,
            )?;
        }
        let n = &self.numerics;
        let q = &n.quadrature;
        require(
            q.nodes >= 8,
            "numerics.quadrature.nodes",
            "at least 8 nodes",
            q.nodes as f64,
        )?;
        require(q.rel_tol > 0.0, "numerics.quadrature.rel_tol", "> 0", q.rel_tol)?;
        require(q.abs_tol > 0.0, "numerics.quadrature.abs_tol", "> 0", q.abs_tol)?;
        require(
            q.tail_mass > 0.0 && q.tail_mass < 1e-3,
            "numerics.quadrature.tail_mass",
            "in (0, 1e-3)",
            q.tail_mass,
        )?;
        require(n.foc_rel_tol > 0.0, "numerics.foc_rel_tol", "> 0", n.foc_rel_tol)?;
        require(
            n.detector_rel_tol >= 0.0,
            "numerics.detector_rel_tol",
            ">= 0",
            n.detector_rel_tol,
        )?;
        require(
            n.concavity_tol >= 0.0,
            "numerics.concavity_tol",
            ">= 0",
            n.concavity_tol,
        )?;
        Ok(())
    }

    pub fn curve(&self) -> PriceCurve {
        PriceCurve {
            mode: self.demand_mode,
            demand: self.demand,
            gamma: self.elasticity_gamma,
            q: self.q_unit,
        }
    }
}

/// Inverse demand curve with its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceCurve {
    pub mode: DemandMode,
    pub demand: f64,
    pub gamma: f64,
    pub q: f64,
}

impl PriceCurve {
    #[inline]
    pub fn price(&self, supply: f64) -> f64 {
        match self.mode {
            DemandMode::UnitElastic => self.demand / supply,
            DemandMode::PerfectlyElastic => 1.0,
            DemandMode::ConstantElasticity => (self.q / supply).powf(1.0 / self.gamma),
        }
    }

    #[inline]
    pub fn d1(&self, supply: f64) -> f64 {
        match self.mode {
            DemandMode::UnitElastic => -self.demand / (supply * supply),
            DemandMode::PerfectlyElastic => 0.0,
            DemandMode::ConstantElasticity => -self.price(supply) / (self.gamma * supply),
        }
    }

    #[inline]
    pub fn d2(&self, supply: f64) -> f64 {
        match self.mode {
            DemandMode::UnitElastic => 2.0 * self.demand / (supply * supply * supply),
            DemandMode::PerfectlyElastic => 0.0,
            DemandMode::ConstantElasticity => {
                let k = 1.0 / self.gamma;
                k * (k + 1.0) * self.price(supply) / (supply * supply)
            }
        }
    }
}

/// Lifecycle of a simulated path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PathStatus {
    #[default]
    Active,
    /// Liquidation consumed all collateral; the state is frozen.
    WipedOut,
    /// No feasible supply decision existed; the state is frozen.
    Insolvent,
    /// Supply dropped below the floor; the state is frozen.
    SupplyFloor,
}

impl PathStatus {
    pub fn is_halted(self) -> bool {
        self != PathStatus::Active
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PathStatus::Active => "active",
            PathStatus::WipedOut => "wiped_out",
            PathStatus::Insolvent => "insolvent",
            PathStatus::SupplyFloor => "supply_floor",
        }
    }
}

/// One time slice of the system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub t: usize,
    /// ETH price.
    pub x: f64,
    /// Speculator liability.
    pub l: f64,
    /// Total supply, outside supply plus liability.
    pub supply: f64,
    /// Speculator ETH position.
    pub n: f64,
    /// Collateral at stake for the next step.
    pub nbar: f64,
    /// Stablecoin clearing price.
    pub z: f64,
    /// Speculator equity.
    pub y: f64,
    pub status: PathStatus,
}

impl SystemState {
    /// Builds a consistent active state from the primitive quantities.
    pub fn new(x: f64, l: f64, n: f64, nbar: f64, params: &SystemParams) -> Result<Self> {
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::Domain(format!("ETH price must be positive, got {x}")));
        }
        if !(l >= 0.0) || !(n >= 0.0) || !(nbar >= 0.0) {
            return Err(Error::Domain(format!(
                "liability and positions must be non-negative (l={l}, n={n}, nbar={nbar})"
            )));
        }
        if nbar > n * (1.0 + 1e-12) {
            return Err(Error::Domain(format!("collateral {nbar} exceeds the position {n}")));
        }
        let supply = params.zeta + l;
        let z = clearing_price(supply, params)?;
        Ok(Self {
            t: 0,
            x,
            l,
            supply,
            n,
            nbar,
            z,
            y: n * x - l,
            status: PathStatus::Active,
        })
    }

    pub fn wiped_out(&self) -> bool {
        self.status == PathStatus::WipedOut
    }

    pub fn is_halted(&self) -> bool {
        self.status.is_halted()
    }
}

/// Liquidation trigger price `b` and exhaustion price `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LiquidationKind {
    #[default]
    None,
    Partial,
    Wipeout,
}

impl LiquidationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LiquidationKind::None => "none",
            LiquidationKind::Partial => "partial",
            LiquidationKind::Wipeout => "wipeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LiquidationOutcome {
    /// Stablecoins repurchased (attempted, for a wipeout).
    pub ell: f64,
    /// Fee-inclusive repurchase price.
    pub repurchase_price: f64,
    /// ETH removed from the locked collateral.
    pub collateral_cost: f64,
    pub kind: LiquidationKind,
}

/// Market-clearing stablecoin price for a given total supply.
pub fn clearing_price(supply: f64, params: &SystemParams) -> Result<f64> {
    if !(supply >= params.v_floor) {
        return Err(Error::SupplyFloor {
            supply,
            floor: params.v_floor,
        });
    }
    Ok(params.curve().price(supply))
}

/// Highest next-step ETH price at which the collateral constraint is breached.
pub fn threshold_b(l: f64, nbar: f64, beta: f64) -> Result<f64> {
    if !(nbar > 0.0) {
        return Err(Error::DegenerateCollateral);
    }
    Ok(beta * l / nbar)
}

/// Collateral value at which a forced liquidation consumes all collateral,
/// with its first two derivatives in the liability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exhaustion {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Collateral value `y` at which the fee-inclusive repurchase cost of the
/// forced liquidation equals `y`. Does not depend on the collateral amount;
/// the exhaustion price is this value divided by the collateral.
pub fn exhaustion_value(l: f64, params: &SystemParams) -> Result<f64> {
    if !(l >= 0.0) {
        return Err(Error::Domain(format!("liability must be non-negative, got {l}")));
    }
    let (alpha, beta, zeta) = (params.alpha, params.beta, params.zeta);
    match params.demand_mode {
        DemandMode::UnitElastic => {
            let ad = alpha * params.demand;
            let b = zeta * (beta - 1.0) - l + ad;
            let c = ad * beta * l;
            let disc = (b * b + 4.0 * c).sqrt();
            Ok(if b > 0.0 {
                2.0 * c / (b + disc)
            } else {
                0.5 * (disc - b)
            })
        }
        DemandMode::PerfectlyElastic => Ok(alpha * beta * l / (alpha + beta - 1.0)),
        DemandMode::ConstantElasticity => exhaustion_value_by_bisection(l, params),
    }
}

/// Bracketed bisection on the exhaustion equation; valid for every demand mode.
pub fn exhaustion_value_by_bisection(l: f64, params: &SystemParams) -> Result<f64> {
    if l == 0.0 {
        return Ok(0.0);
    }
    let curve = params.curve();
    let (alpha, beta) = (params.alpha, params.beta);
    let supply = params.zeta + l;
    let excess = |y: f64| {
        let ell = (beta * l - y) / (beta - 1.0);
        let s = supply - ell;
        if s <= 0.0 {
            f64::INFINITY
        } else {
            alpha * ell * curve.price(s) - y
        }
    };
    let mut lo = (l - params.zeta * (beta - 1.0)).max(0.0);
    let mut hi = beta * l;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::ThresholdSolve(format!(
        "bracket [{lo}, {hi}] did not shrink for liability {l}"
    )))
}

/// Exhaustion value with its liability derivatives from implicit differentiation.
pub fn exhaustion(l: f64, params: &SystemParams) -> Result<Exhaustion> {
    let y = exhaustion_value(l, params)?;
    let curve = params.curve();
    let (alpha, beta) = (params.alpha, params.beta);
    let a = -1.0 / (beta - 1.0);
    let e = beta / (beta - 1.0);
    let s_y = -a;
    let s_l = 1.0 - e;
    let ell = (beta * l - y) / (beta - 1.0);
    let s = params.zeta + l - ell;
    let (p, p1, p2) = (curve.price(s), curve.d1(s), curve.d2(s));
    let f_y = alpha * a * (p - ell * p1) - 1.0;
    let f_l = alpha * (e * p + ell * p1 * s_l);
    let f_yy = alpha * (2.0 * a * p1 * s_y + ell * p2 * s_y * s_y);
    let f_yl = alpha * (p1 * (a * s_l + e * s_y) + ell * p2 * s_y * s_l);
    let f_ll = alpha * (2.0 * e * p1 * s_l + ell * p2 * s_l * s_l);
    let d1 = -f_l / f_y;
    let d2 = -(f_yy * d1 * d1 + 2.0 * f_yl * d1 + f_ll) / f_y;
    Ok(Exhaustion { value: y, d1, d2 })
}

/// Next-step ETH price below which liquidation consumes all collateral.
pub fn threshold_c(l: f64, nbar: f64, params: &SystemParams) -> Result<f64> {
    if !(nbar > 0.0) {
        return Err(Error::DegenerateCollateral);
    }
    Ok(exhaustion_value(l, params)? / nbar)
}

pub fn thresholds(l: f64, nbar: f64, params: &SystemParams) -> Result<Thresholds> {
    Ok(Thresholds {
        b: threshold_b(l, nbar, params.beta)?,
        c: threshold_c(l, nbar, params)?,
    })
}

/// Stablecoins that must be repurchased to restore the collateral factor.
pub fn liquidation_amount(l: f64, nbar: f64, x: f64, beta: f64) -> Result<f64> {
    let b = threshold_b(l, nbar, beta)?;
    if x > b {
        return Err(Error::Precondition(format!(
            "price {x} is above the liquidation threshold {b}"
        )));
    }
    Ok(((beta * l - nbar * x) / (beta - 1.0)).max(0.0))
}

/// Liquidation arithmetic at a fixed liability and supply, as a function of the
/// collateral value `y` at the next ETH price.
#[derive(Debug, Clone, Copy)]
pub struct LiquidationEffect {
    pub l: f64,
    pub supply: f64,
    pub alpha: f64,
    pub beta: f64,
    pub curve: PriceCurve,
}

impl LiquidationEffect {
    pub fn new(l: f64, params: &SystemParams) -> Self {
        Self {
            l,
            supply: params.zeta + l,
            alpha: params.alpha,
            beta: params.beta,
            curve: params.curve(),
        }
    }

    #[inline]
    fn parts(&self, y: f64) -> (f64, f64) {
        let ell = (self.beta * self.l - y) / (self.beta - 1.0);
        (ell, self.supply - ell)
    }

    #[inline]
    fn e(&self) -> f64 {
        self.beta / (self.beta - 1.0)
    }

    #[inline]
    fn a(&self) -> f64 {
        -1.0 / (self.beta - 1.0)
    }

    /// Equity change from the liquidation: stablecoins retired minus dollars paid.
    #[inline]
    pub fn value(&self, y: f64) -> f64 {
        let (ell, s) = self.parts(y);
        ell * (1.0 - self.alpha * self.curve.price(s))
    }

    /// Derivative of [`Self::value`] in the liability.
    #[inline]
    pub fn d_liability(&self, y: f64) -> f64 {
        let (ell, s) = self.parts(y);
        let e = self.e();
        e * (1.0 - self.alpha * self.curve.price(s)) - ell * self.alpha * (1.0 - e) * self.curve.d1(s)
    }

    /// Second derivative of [`Self::value`] in the liability.
    #[inline]
    pub fn d2_liability(&self, y: f64) -> f64 {
        let (ell, s) = self.parts(y);
        let e = self.e();
        -2.0 * e * self.alpha * (1.0 - e) * self.curve.d1(s)
            - ell * self.alpha * (1.0 - e) * (1.0 - e) * self.curve.d2(s)
    }

    /// Derivative of [`Self::value`] in the collateral value.
    #[inline]
    pub fn d_collateral(&self, y: f64) -> f64 {
        let (ell, s) = self.parts(y);
        self.a() * (1.0 - self.alpha * self.curve.price(s) + self.alpha * ell * self.curve.d1(s))
    }

    /// Mixed derivative of [`Self::value`] in liability and collateral value.
    #[inline]
    pub fn d2_liability_collateral(&self, y: f64) -> f64 {
        let (ell, s) = self.parts(y);
        let e = self.e();
        self.alpha * self.a() * ((2.0 * e - 1.0) * self.curve.d1(s) + (1.0 - e) * ell * self.curve.d2(s))
    }
}

/// Applies the forced liquidation triggered by the move to `x_next`.
///
/// Returns the post-liquidation state (equity marked at `x_next`, time index
/// unchanged) and the outcome. The collateral update removes the ETH value of
/// the fee-inclusive repurchase cost.
pub fn apply_liquidation(
    state: &SystemState,
    x_next: f64,
    params: &SystemParams,
) -> Result<(SystemState, LiquidationOutcome)> {
    if state.is_halted() {
        return Err(Error::Precondition(format!(
            "liquidation on a halted state ({})",
            state.status.as_str()
        )));
    }
    if !(x_next >= 0.0) {
        return Err(Error::Domain(format!("ETH price must be non-negative, got {x_next}")));
    }
    let mut next = *state;
    next.x = x_next;
    let collateral_value = state.nbar * x_next;
    if state.l == 0.0 || collateral_value >= params.beta * state.l {
        next.y = state.n * x_next - state.l;
        return Ok((next, LiquidationOutcome::default()));
    }
    let ell = (params.beta * state.l - collateral_value) / (params.beta - 1.0);
    let exhaust = exhaustion_value(state.l, params)?;
    let remaining = state.supply - ell;
    let price_after = if remaining > 0.0 {
        params.curve().price(remaining)
    } else {
        f64::INFINITY
    };
    let repurchase_price = params.alpha * price_after;
    if collateral_value < exhaust || remaining <= 0.0 {
        next.n = state.n - state.nbar;
        next.nbar = 0.0;
        next.y = next.n * x_next;
        next.status = PathStatus::WipedOut;
        let outcome = LiquidationOutcome {
            ell,
            repurchase_price,
            collateral_cost: state.nbar,
            kind: LiquidationKind::Wipeout,
        };
        return Ok((next, outcome));
    }
    let cost = ell * repurchase_price;
    let eth = (cost / x_next).min(state.nbar);
    next.l = state.l - ell;
    next.supply = remaining;
    next.n = state.n - eth;
    next.nbar = state.nbar - eth;
    next.z = price_after;
    next.y = next.n * x_next - next.l;
    if next.supply < params.v_floor {
        next.status = PathStatus::SupplyFloor;
    }
    let outcome = LiquidationOutcome {
        ell,
        repurchase_price,
        collateral_cost: eth,
        kind: LiquidationKind::Partial,
    };
    Ok((next, outcome))
}

/// The elementary inequality chain behind the threshold bounds:
/// `(αD + L, √(α²D² + 4αDL + L²), min(2αD + L, αD + L + √(2αDL)))`.
pub fn elementary_bounds(alpha: f64, demand: f64, l: f64) -> Result<(f64, f64, f64)> {
    if !(alpha >= 0.0 && demand >= 0.0 && l >= 0.0) {
        return Err(Error::Domain(format!(
            "inputs must be non-negative (alpha={alpha}, D={demand}, L={l})"
        )));
    }
    let ad = alpha * demand;
    let lower = ad + l;
    let mid = (ad * ad + 4.0 * ad * l + l * l).sqrt();
    let upper = (2.0 * ad + l).min(ad + l + (2.0 * ad * l).sqrt());
    Ok((lower, mid, upper))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(alpha: f64, demand: f64) -> SystemParams {
        SystemParams {
            alpha,
            demand,
            ..SystemParams::default()
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn clearing_price_examples() {
        let p = unit(1.0, 100.0);
        assert_eq!(clearing_price(100.0, &p).unwrap(), 1.0);
        assert_eq!(clearing_price(200.0, &p).unwrap(), 0.5);
        let ce = SystemParams {
            demand_mode: DemandMode::ConstantElasticity,
            elasticity_gamma: 2.0,
            q_unit: 100.0,
            ..p
        };
        assert_eq!(clearing_price(100.0, &ce).unwrap(), 1.0);
        let pe = SystemParams {
            demand_mode: DemandMode::PerfectlyElastic,
            ..p
        };
        assert_eq!(clearing_price(37.0, &pe).unwrap(), 1.0);
        assert!(matches!(clearing_price(1e-9, &p), Err(Error::SupplyFloor { .. })));
    }

    #[test]
    fn constant_elasticity_reduces_to_unit_elastic() {
        let ce = SystemParams {
            demand_mode: DemandMode::ConstantElasticity,
            elasticity_gamma: 1.0,
            q_unit: 100.0,
            ..unit(1.0, 100.0)
        };
        for s in [1.0, 37.5, 100.0, 420.0] {
            assert!(rel(clearing_price(s, &ce).unwrap(), 100.0 / s) < 1e-14);
        }
    }

    #[test]
    fn threshold_b_examples() {
        assert_eq!(threshold_b(2.0, 3.0, 1.5).unwrap(), 1.0);
        assert_eq!(threshold_b(100.0, 150.0, 1.5).unwrap(), 1.0);
        assert_eq!(threshold_b(10.0, 4.0, 1.5).unwrap(), 3.75);
        assert_eq!(threshold_b(10.0, 0.0, 1.5), Err(Error::DegenerateCollateral));
    }

    #[test]
    fn threshold_c_examples() {
        assert!(rel(threshold_c(100.0, 50.0, &unit(1.0, 0.0)).unwrap(), 2.0) < 1e-14);
        // Closed form for the 3/2 case: (sqrt(α²D²+4αDL+L²) − αD + L)/(2N̄).
        let c = threshold_c(100.0, 100.0, &unit(1.0, 100.0)).unwrap();
        assert!(rel(c, 60000f64.sqrt() / 200.0) < 1e-14);
        assert!((c - 1.224745).abs() < 1e-6);
        assert!((1.0..=1.5).contains(&c));
    }

    #[test]
    fn perfectly_elastic_threshold_matches_closed_form() {
        let p = SystemParams {
            demand_mode: DemandMode::PerfectlyElastic,
            ..unit(1.3, 100.0)
        };
        let c = threshold_c(80.0, 40.0, &p).unwrap();
        assert!(rel(c, 3.0 * 1.3 * 80.0 / (40.0 * (2.0 * 1.3 + 1.0))) < 1e-14);
    }

    #[test]
    fn closed_form_exhaustion_matches_bisection() {
        for &(beta, zeta, alpha) in &[(1.5, 0.0, 1.0), (2.0, 30.0, 1.2), (1.2, 5.0, 1.05)] {
            let p = SystemParams {
                beta,
                zeta,
                alpha,
                ..unit(alpha, 100.0)
            };
            for l in [1.0, 20.0, 100.0, 700.0] {
                let closed = exhaustion_value(l, &p).unwrap();
                let bis = exhaustion_value_by_bisection(l, &p).unwrap();
                assert!(rel(closed, bis) < 1e-12, "beta={beta} l={l}: {closed} vs {bis}");
            }
        }
    }

    #[test]
    fn exhaustion_derivatives_match_finite_differences() {
        for mode in [DemandMode::UnitElastic, DemandMode::ConstantElasticity] {
            let p = SystemParams {
                demand_mode: mode,
                elasticity_gamma: if mode == DemandMode::UnitElastic { 1.0 } else { 1.7 },
                zeta: 12.0,
                beta: 1.8,
                ..unit(1.1, 100.0)
            };
            let l = 90.0;
            let h = 1e-3;
            let ex = exhaustion(l, &p).unwrap();
            let yp = exhaustion_value(l + h, &p).unwrap();
            let ym = exhaustion_value(l - h, &p).unwrap();
            let fd1 = (yp - ym) / (2.0 * h);
            let fd2 = (yp - 2.0 * ex.value + ym) / (h * h);
            assert!(rel(ex.d1, fd1) < 1e-7, "{mode:?} d1 {} vs {fd1}", ex.d1);
            assert!(rel(ex.d2, fd2) < 1e-3, "{mode:?} d2 {} vs {fd2}", ex.d2);
        }
    }

    #[test]
    fn liquidation_amount_examples() {
        assert_eq!(liquidation_amount(10.0, 4.0, 3.0, 1.5).unwrap(), 6.0);
        assert_eq!(liquidation_amount(10.0, 4.0, 3.75, 1.5).unwrap(), 0.0);
        assert_eq!(liquidation_amount(10.0, 4.0, 4.0, 2.0).unwrap(), 4.0);
        assert!(matches!(
            liquidation_amount(10.0, 4.0, 3.8, 1.5),
            Err(Error::Precondition(_))
        ));
    }

    fn example_state(p: &SystemParams) -> SystemState {
        SystemState::new(3.0, 100.0, 60.0, 60.0, p).unwrap()
    }

    #[test]
    fn apply_liquidation_examples() {
        let p = unit(1.0, 100.0);
        let s = example_state(&p);
        let (_, none) = apply_liquidation(&s, 2.5, &p).unwrap();
        assert_eq!(none.kind, LiquidationKind::None);

        let (next, out) = apply_liquidation(&s, 2.2, &p).unwrap();
        assert_eq!(out.kind, LiquidationKind::Partial);
        assert!(rel(out.ell, 36.0) < 1e-12);
        assert!(rel(out.repurchase_price, 1.5625) < 1e-12);
        assert!(rel(out.collateral_cost, 56.25 / 2.2) < 1e-12);
        assert!(rel(next.l, 64.0) < 1e-12);
        assert!((next.nbar - 34.432).abs() < 1e-3);
        assert!(rel(next.z, 100.0 / 64.0) < 1e-12);

        let (wiped, out) = apply_liquidation(&s, 1.0, &p).unwrap();
        assert_eq!(out.kind, LiquidationKind::Wipeout);
        assert_eq!(wiped.nbar, 0.0);
        assert!(wiped.wiped_out());
        assert!(apply_liquidation(&wiped, 3.0, &p).is_err());
    }

    #[test]
    fn elementary_bounds_examples() {
        let (lo, mid, hi) = elementary_bounds(1.0, 1.0, 1.0).unwrap();
        assert_eq!((lo, hi), (2.0, 3.0));
        assert!(rel(mid, 6f64.sqrt()) < 1e-15);
        assert_eq!(elementary_bounds(1.0, 0.0, 5.0).unwrap(), (5.0, 5.0, 5.0));
        assert_eq!(elementary_bounds(2.0, 3.0, 0.0).unwrap(), (6.0, 6.0, 6.0));
        assert!(elementary_bounds(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let p = SystemParams {
            beta: 0.9,
            ..SystemParams::default()
        };
        match p.validate() {
            Err(Error::InvalidParameter { field, constraint, .. }) => {
                assert_eq!(field, "beta");
                assert!(constraint.contains("> 1"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(SystemParams::default().validate().is_ok());
    }
}
