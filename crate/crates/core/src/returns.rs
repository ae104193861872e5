//! One-step ETH return distributions: densities, tail probabilities, partial
//! moments, quantiles, sampling, and expectations of the liquidation integrands.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LiquidationEffect, Thresholds};
use crate::quadrature::{integrate_scalar, QuadratureSpec};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Distribution of the gross return `R = X_{t+1} / X_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReturnModel {
    /// `ln R ~ N(mu, sigma²)`; `sigma = 0` is a point mass at `e^mu`.
    Lognormal { mu: f64, sigma: f64 },
    /// Uniform on `[lo, hi]`; `lo = hi` is a point mass.
    Uniform { lo: f64, hi: f64 },
    /// Kernel estimate from observed log returns: an equal-weight mixture of
    /// lognormals centred on each sample with log-scale `bandwidth`.
    Empirical { log_returns: Vec<f64>, bandwidth: f64 },
}

/// Probabilities of no liquidation, partial liquidation and wipeout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventProbabilities {
    pub p_a: f64,
    pub p_b: f64,
    pub p_wipe: f64,
}

#[inline]
fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

#[inline]
fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// Standard normal quantile: Acklam's rational approximation refined by one
/// Halley step against the accurate `erfc`.
pub(crate) fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383_577_518_672_69e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    let tail = |q: f64| {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    let x = if p < 0.02425 {
        tail(p)
    } else if p > 1.0 - 0.02425 {
        -tail(1.0 - p)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    // Residual measured on the smaller tail to avoid cancellation.
    let e = if x < 0.0 {
        norm_cdf(x) - p
    } else {
        (1.0 - p) - norm_sf(x)
    };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// `P(a <= N < b)` for a standard normal, without cancellation in either tail.
#[inline]
fn norm_mass(a: f64, b: f64) -> f64 {
    if b <= a {
        0.0
    } else if a >= 0.0 {
        norm_sf(a) - norm_sf(b)
    } else if b <= 0.0 {
        norm_cdf(b) - norm_cdf(a)
    } else {
        1.0 - norm_cdf(a) - norm_sf(b)
    }
}

#[inline]
fn ln_or_neg_inf(z: f64) -> f64 {
    if z <= 0.0 {
        f64::NEG_INFINITY
    } else {
        z.ln()
    }
}

/// Moments of one lognormal component over `[lo, hi)`.
#[derive(Clone, Copy)]
struct Lognormal {
    mu: f64,
    sigma: f64,
}

impl Lognormal {
    fn std(&self, z: f64) -> f64 {
        (ln_or_neg_inf(z) - self.mu) / self.sigma
    }

    fn pdf(&self, z: f64) -> f64 {
        if z <= 0.0 {
            return 0.0;
        }
        let u = self.std(z);
        INV_SQRT_2PI * (-0.5 * u * u).exp() / (z * self.sigma)
    }

    fn pdf_d1(&self, z: f64) -> f64 {
        if z <= 0.0 {
            return 0.0;
        }
        let u = self.std(z);
        -self.pdf(z) * (1.0 + u / self.sigma) / z
    }

    fn mass(&self, lo: f64, hi: f64) -> f64 {
        norm_mass(self.std(lo), self.std(hi))
    }

    fn first_moment(&self, lo: f64, hi: f64) -> f64 {
        let shift = self.sigma;
        (self.mu + 0.5 * self.sigma * self.sigma).exp() * norm_mass(self.std(lo) - shift, self.std(hi) - shift)
    }

    fn quantile(&self, p: f64) -> f64 {
        (self.mu + self.sigma * norm_quantile(p)).exp()
    }
}

impl ReturnModel {
    /// Lognormal model with the given mean and log-volatility.
    pub fn lognormal_with_mean(mean: f64, sigma: f64) -> Self {
        ReturnModel::Lognormal {
            mu: mean.ln() - 0.5 * sigma * sigma,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Domain(format!("invalid return model: {what}")));
        match self {
            ReturnModel::Lognormal { mu, sigma } => {
                if !mu.is_finite() || !sigma.is_finite() || *sigma < 0.0 {
                    return bad("lognormal needs finite mu and sigma >= 0");
                }
            }
            ReturnModel::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && *lo >= 0.0 && hi >= lo) {
                    return bad("uniform needs 0 <= lo <= hi");
                }
            }
            ReturnModel::Empirical { log_returns, bandwidth } => {
                if log_returns.is_empty() || log_returns.iter().any(|v| !v.is_finite()) {
                    return bad("empirical needs a non-empty finite sample");
                }
                if !(bandwidth.is_finite() && *bandwidth > 0.0) {
                    return bad("empirical bandwidth must be positive");
                }
            }
        }
        Ok(())
    }

    /// The atom when the distribution is degenerate.
    pub fn point_mass(&self) -> Option<f64> {
        match self {
            ReturnModel::Lognormal { mu, sigma } if *sigma == 0.0 => Some(mu.exp()),
            ReturnModel::Uniform { lo, hi } if lo == hi => Some(*lo),
            _ => None,
        }
    }

    fn components(&self) -> impl Iterator<Item = Lognormal> + '_ {
        let (samples, sigma): (&[f64], f64) = match self {
            ReturnModel::Empirical { log_returns, bandwidth } => (log_returns.as_slice(), *bandwidth),
            _ => (&[], 0.0),
        };
        samples.iter().map(move |&mu| Lognormal { mu, sigma })
    }

    fn weight(&self) -> f64 {
        match self {
            ReturnModel::Empirical { log_returns, .. } => 1.0 / log_returns.len() as f64,
            _ => 1.0,
        }
    }

    /// Density; zero for point masses.
    pub fn pdf(&self, z: f64) -> f64 {
        if self.point_mass().is_some() {
            return 0.0;
        }
        match self {
            ReturnModel::Lognormal { mu, sigma } => Lognormal { mu: *mu, sigma: *sigma }.pdf(z),
            ReturnModel::Uniform { lo, hi } => {
                if z >= *lo && z <= *hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            ReturnModel::Empirical { .. } => self.weight() * self.components().map(|c| c.pdf(z)).sum::<f64>(),
        }
    }

    /// Derivative of the density.
    pub fn pdf_d1(&self, z: f64) -> f64 {
        if self.point_mass().is_some() {
            return 0.0;
        }
        match self {
            ReturnModel::Lognormal { mu, sigma } => Lognormal { mu: *mu, sigma: *sigma }.pdf_d1(z),
            ReturnModel::Uniform { .. } => 0.0,
            ReturnModel::Empirical { .. } => self.weight() * self.components().map(|c| c.pdf_d1(z)).sum::<f64>(),
        }
    }

    /// `P(lo <= R < hi)`.
    pub fn mass(&self, lo: f64, hi: f64) -> f64 {
        if !(hi > lo) {
            return 0.0;
        }
        if let Some(v) = self.point_mass() {
            return if lo <= v && v < hi { 1.0 } else { 0.0 };
        }
        match self {
            ReturnModel::Lognormal { mu, sigma } => Lognormal { mu: *mu, sigma: *sigma }.mass(lo, hi),
            ReturnModel::Uniform { lo: a, hi: b } => {
                let (l, h) = (lo.max(*a), hi.min(*b));
                if h > l {
                    (h - l) / (b - a)
                } else {
                    0.0
                }
            }
            ReturnModel::Empirical { .. } => self.weight() * self.components().map(|c| c.mass(lo, hi)).sum::<f64>(),
        }
    }

    /// `P(R < z)`.
    pub fn cdf(&self, z: f64) -> f64 {
        self.mass(f64::NEG_INFINITY, z)
    }

    /// `P(R >= z)`.
    pub fn sf(&self, z: f64) -> f64 {
        self.mass(z, f64::INFINITY)
    }

    /// `E[R; lo <= R < hi]`.
    pub fn first_moment(&self, lo: f64, hi: f64) -> f64 {
        if !(hi > lo) {
            return 0.0;
        }
        if let Some(v) = self.point_mass() {
            return if lo <= v && v < hi { v } else { 0.0 };
        }
        match self {
            ReturnModel::Lognormal { mu, sigma } => Lognormal { mu: *mu, sigma: *sigma }.first_moment(lo, hi),
            ReturnModel::Uniform { lo: a, hi: b } => {
                let (l, h) = (lo.max(*a), hi.min(*b));
                if h > l {
                    (h * h - l * l) / (2.0 * (b - a))
                } else {
                    0.0
                }
            }
            ReturnModel::Empirical { .. } => {
                self.weight() * self.components().map(|c| c.first_moment(lo, hi)).sum::<f64>()
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            ReturnModel::Lognormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
            ReturnModel::Uniform { lo, hi } => 0.5 * (lo + hi),
            ReturnModel::Empirical { bandwidth, .. } => {
                let h2 = 0.5 * bandwidth * bandwidth;
                self.weight() * self.components().map(|c| (c.mu + h2).exp()).sum::<f64>()
            }
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            ReturnModel::Lognormal { mu, sigma } => {
                let s2 = sigma * sigma;
                s2.exp_m1() * (2.0 * mu + s2).exp()
            }
            ReturnModel::Uniform { lo, hi } => (hi - lo) * (hi - lo) / 12.0,
            ReturnModel::Empirical { bandwidth, .. } => {
                let h2 = bandwidth * bandwidth;
                let second = self.weight() * self.components().map(|c| (2.0 * c.mu + 2.0 * h2).exp()).sum::<f64>();
                let m = self.mean();
                (second - m * m).max(0.0)
            }
        }
    }

    /// Smallest `z` with `P(R <= z) >= p`.
    pub fn quantile(&self, p: f64) -> f64 {
        if let Some(v) = self.point_mass() {
            return v;
        }
        let p = p.clamp(0.0, 1.0);
        match self {
            ReturnModel::Lognormal { mu, sigma } => Lognormal { mu: *mu, sigma: *sigma }.quantile(p),
            ReturnModel::Uniform { lo, hi } => lo + p * (hi - lo),
            ReturnModel::Empirical { log_returns, bandwidth } => {
                if p <= 0.0 {
                    return 0.0;
                }
                if p >= 1.0 {
                    return f64::INFINITY;
                }
                let min = log_returns.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = log_returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let (mut a, mut b) = (min - 40.0 * bandwidth, max + 40.0 * bandwidth);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if self.cdf(m.exp()) < p {
                        a = m;
                    } else {
                        b = m;
                    }
                    if b - a < 1e-15 * (1.0 + m.abs()) {
                        break;
                    }
                }
                (0.5 * (a + b)).exp()
            }
        }
    }

    /// Closed support `[lo, hi]` (possibly unbounded above).
    pub fn support(&self) -> (f64, f64) {
        match self {
            ReturnModel::Uniform { lo, hi } => (*lo, *hi),
            _ => match self.point_mass() {
                Some(v) => (v, v),
                None => (0.0, f64::INFINITY),
            },
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ReturnModel::Lognormal { mu, sigma } => {
                let n: f64 = rng.sample(StandardNormal);
                (mu + sigma * n).exp()
            }
            ReturnModel::Uniform { lo, hi } => lo + (hi - lo) * rng.gen::<f64>(),
            ReturnModel::Empirical { log_returns, bandwidth } => {
                let i = rng.gen_range(0..log_returns.len());
                let n: f64 = rng.sample(StandardNormal);
                (log_returns[i] + bandwidth * n).exp()
            }
        }
    }

    /// Interior points worth splitting quadrature panels at.
    fn shape_breaks(&self, lo: f64, hi: f64) -> Vec<f64> {
        // Standard normal quantiles at 1e-8, 1e-4, 0.02, 0.5 and their mirrors.
        const Z: [f64; 7] = [
            -5.612_001_244_174_789,
            -3.719_016_485_455_68,
            -2.053_748_910_631_823,
            0.0,
            2.053_748_910_631_823,
            3.719_016_485_455_68,
            5.612_001_244_174_789,
        ];
        let mut out = Vec::new();
        match self {
            ReturnModel::Lognormal { mu, sigma } => {
                for z in Z {
                    let q = (mu + sigma * z).exp();
                    if q > lo && q < hi {
                        out.push(q);
                    }
                }
            }
            ReturnModel::Empirical { .. } => {
                for p in [1e-8, 1e-4, 0.02, 0.5, 0.98, 1.0 - 1e-4, 1.0 - 1e-8] {
                    let q = self.quantile(p);
                    if q > lo && q < hi {
                        out.push(q);
                    }
                }
            }
            ReturnModel::Uniform { .. } => {}
        }
        out
    }
}

/// Draws one return.
pub fn sample_return<R: Rng + ?Sized>(model: &ReturnModel, rng: &mut R) -> f64 {
    model.sample(rng)
}

/// One-step conditional expected return.
pub fn conditional_mean(model: &ReturnModel) -> f64 {
    model.mean()
}

/// Probabilities of the three liquidation outcomes for a move from `x`.
pub fn event_probabilities(model: &ReturnModel, x: f64, th: &Thresholds) -> EventProbabilities {
    let kb = th.b / x;
    let kc = (th.c / x).min(kb);
    let p_a = model.sf(kb);
    let p_b = model.mass(kc, kb);
    let p_wipe = model.cdf(kc);
    EventProbabilities { p_a, p_b, p_wipe }
}

/// Which term of the liquidation arithmetic an expectation integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiquidationTerm {
    /// Equity change from the liquidation.
    Value,
    /// Its derivative in the liability.
    LiabilitySlope,
    /// Its second derivative in the liability.
    LiabilityCurvature,
    /// Mixed liability/collateral-value derivative, times the return.
    CrossSlope,
    /// Collateral-value derivative, times the return.
    CollateralSlope,
}

/// Integrands whose expectations enter the objective and its derivatives.
#[derive(Debug, Clone, Copy)]
pub enum Integrand {
    One,
    Identity,
    /// A liquidation term evaluated at collateral value `collateral · z`.
    Liquidation {
        term: LiquidationTerm,
        effect: LiquidationEffect,
        collateral: f64,
    },
}

impl Integrand {
    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Integrand::One => 1.0,
            Integrand::Identity => z,
            Integrand::Liquidation {
                term,
                effect,
                collateral,
            } => {
                let y = collateral * z;
                match term {
                    LiquidationTerm::Value => effect.value(y),
                    LiquidationTerm::LiabilitySlope => effect.d_liability(y),
                    LiquidationTerm::LiabilityCurvature => effect.d2_liability(y),
                    LiquidationTerm::CrossSlope => effect.d2_liability_collateral(y) * z,
                    LiquidationTerm::CollateralSlope => effect.d_collateral(y) * z,
                }
            }
        }
    }

    /// Natural magnitude used to turn the relative absolute tolerance into units.
    pub fn scale(&self) -> f64 {
        match self {
            Integrand::One | Integrand::Identity => 1.0,
            Integrand::Liquidation {
                term,
                effect,
                collateral,
            } => match term {
                LiquidationTerm::Value => effect.supply.max(1e-300),
                LiquidationTerm::LiabilitySlope | LiquidationTerm::CollateralSlope => 1.0,
                LiquidationTerm::LiabilityCurvature => 1.0 / effect.supply.max(1e-300),
                LiquidationTerm::CrossSlope => 1.0 / collateral.max(1e-300),
            },
        }
    }
}

/// Integral estimate with its error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expectation {
    pub value: f64,
    pub error: f64,
}

/// `E[f(R); lo <= R < hi]` for a tagged integrand.
///
/// The open upper tail is truncated where the remaining probability mass
/// drops below `spec.tail_mass`; a bound on the dropped part is added to the
/// reported error.
pub fn partial_expectation(
    model: &ReturnModel,
    lo: f64,
    hi: f64,
    integrand: &Integrand,
    spec: &QuadratureSpec,
) -> Result<Expectation> {
    if !(lo <= hi) {
        return Err(Error::Precondition(format!("empty interval [{lo}, {hi})")));
    }
    expectation_of(
        model,
        lo,
        hi,
        |z| integrand.eval(z),
        spec,
        spec.abs_tol * integrand.scale(),
    )
}

/// Same as [`partial_expectation`] for an arbitrary integrand and absolute tolerance.
pub fn expectation_of<F>(
    model: &ReturnModel,
    lo: f64,
    hi: f64,
    f: F,
    spec: &QuadratureSpec,
    abs_tol: f64,
) -> Result<Expectation>
where
    F: Fn(f64) -> f64,
{
    if let Some(v) = model.point_mass() {
        let value = if lo <= v && v < hi { f(v) } else { 0.0 };
        return Ok(Expectation { value, error: 0.0 });
    }
    let (s_lo, s_hi) = model.support();
    let a = lo.max(s_lo);
    let mut b = hi.min(s_hi);
    let mut tail_error = 0.0;
    if b.is_infinite() {
        let cut = model.quantile(1.0 - spec.tail_mass);
        if cut <= a {
            return Ok(Expectation { value: 0.0, error: 0.0 });
        }
        b = cut;
        tail_error = f(cut).abs() * model.sf(cut) + model.first_moment(cut, f64::INFINITY) * (f(cut) / cut).abs();
    }
    if !(b > a) {
        return Ok(Expectation { value: 0.0, error: 0.0 });
    }
    let mut breaks = vec![a];
    breaks.extend(model.shape_breaks(a, b));
    breaks.push(b);
    let (value, error) = integrate_scalar(|z| Ok(f(z) * model.pdf(z)), &breaks, spec, abs_tol)?;
    Ok(Expectation {
        value,
        error: error + tail_error,
    })
}

/// Law of the return realized at each step: a base model with optional
/// replacements from given steps onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReturnSchedule {
    pub base: ReturnModel,
    #[serde(default)]
    pub shifts: Vec<ScheduledModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledModel {
    /// First step whose return follows `model`.
    pub from_step: usize,
    pub model: ReturnModel,
}

impl ReturnSchedule {
    pub fn iid(model: ReturnModel) -> Self {
        Self {
            base: model,
            shifts: Vec::new(),
        }
    }

    /// Law of `R_step = X_step / X_{step-1}`.
    pub fn model_for(&self, step: usize) -> &ReturnModel {
        self.shifts
            .iter()
            .filter(|s| s.from_step <= step)
            .max_by_key(|s| s.from_step)
            .map(|s| &s.model)
            .unwrap_or(&self.base)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        for s in &self.shifts {
            s.model.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lognormal_breaks_sit_at_their_quantiles() {
        let m = ReturnModel::Lognormal { mu: 0.01, sigma: 0.2 };
        let got = m.shape_breaks(0.0, f64::INFINITY);
        let want: Vec<f64> = [1e-8, 1e-4, 0.02, 0.5, 0.98, 1.0 - 1e-4, 1.0 - 1e-8]
            .iter()
            .map(|&p| m.quantile(p))
            .collect();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g / w - 1.0).abs() < 1e-8, "{g} vs {w}");
        }
    }

    fn models() -> Vec<ReturnModel> {
        vec![
            ReturnModel::Lognormal { mu: 0.001, sigma: 0.05 },
            ReturnModel::Lognormal { mu: -0.02, sigma: 0.3 },
            ReturnModel::Uniform { lo: 0.5, hi: 1.5 },
            ReturnModel::Empirical {
                log_returns: vec![-0.05, -0.01, 0.0, 0.02, 0.04, 0.1],
                bandwidth: 0.02,
            },
        ]
    }

    #[test]
    fn densities_integrate_to_one() {
        let spec = QuadratureSpec::default();
        for m in models() {
            let e = partial_expectation(&m, 0.0, f64::INFINITY, &Integrand::One, &spec).unwrap();
            assert!((e.value - 1.0).abs() < 1e-8, "{m:?}: {}", e.value);
            let e = partial_expectation(&m, 0.0, f64::INFINITY, &Integrand::Identity, &spec).unwrap();
            assert!((e.value - m.mean()).abs() < 1e-8 * m.mean(), "{m:?}");
        }
    }

    #[test]
    fn closed_form_moments_match_quadrature() {
        let spec = QuadratureSpec::default();
        for m in models() {
            for (lo, hi) in [(0.7, 0.95), (0.99, 1.2), (0.0, 0.9)] {
                let q = expectation_of(&m, lo, hi, |_| 1.0, &spec, 1e-15).unwrap().value;
                assert!((q - m.mass(lo, hi)).abs() < 1e-12, "{m:?} mass [{lo},{hi})");
                let q = expectation_of(&m, lo, hi, |z| z, &spec, 1e-15).unwrap().value;
                assert!((q - m.first_moment(lo, hi)).abs() < 1e-12, "{m:?} moment");
            }
        }
    }

    #[test]
    fn density_derivative_matches_finite_difference() {
        for m in models() {
            if matches!(m, ReturnModel::Uniform { .. }) {
                continue;
            }
            for z in [0.8, 0.97, 1.03, 1.2] {
                let h = 1e-6;
                let fd = (m.pdf(z + h) - m.pdf(z - h)) / (2.0 * h);
                let d = m.pdf_d1(z);
                assert!((d - fd).abs() < 1e-5 * (1.0 + d.abs()), "{m:?} z={z}: {d} vs {fd}");
            }
        }
    }

    #[test]
    fn normal_quantile_is_accurate() {
        for p in [1e-300, 1e-20, 1e-9, 0.01, 0.3, 0.5, 0.77, 0.999, 1.0 - 1e-12] {
            let x = norm_quantile(p);
            let back = if x < 0.0 { norm_cdf(x) } else { 1.0 - norm_sf(x) };
            assert!((back - p).abs() <= 1e-14 * p.min(1.0 - p).max(1e-300) + 1e-16, "p={p}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for m in models() {
            for p in [1e-6, 0.1, 0.5, 0.9, 1.0 - 1e-6] {
                let q = m.quantile(p);
                assert!((m.cdf(q) - p).abs() < 1e-9, "{m:?} p={p}");
            }
        }
    }

    #[test]
    fn conditional_mean_examples() {
        assert_eq!(conditional_mean(&ReturnModel::Uniform { lo: 0.5, hi: 1.5 }), 1.0);
        assert_eq!(conditional_mean(&ReturnModel::Lognormal { mu: 0.0, sigma: 0.0 }), 1.0);
        let m = conditional_mean(&ReturnModel::Lognormal { mu: 0.0, sigma: 0.2 });
        assert!((m - 0.02f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn event_probability_examples() {
        let u = ReturnModel::Uniform { lo: 0.5, hi: 1.5 };
        let p = event_probabilities(&u, 1.0, &Thresholds { b: 0.8, c: 0.6 });
        assert!((p.p_a - 0.7).abs() < 1e-15);
        assert!((p.p_b - 0.2).abs() < 1e-15);
        assert!((p.p_wipe - 0.1).abs() < 1e-15);
        let p = event_probabilities(&u, 1.0, &Thresholds { b: 0.4, c: 0.3 });
        assert_eq!((p.p_a, p.p_b, p.p_wipe), (1.0, 0.0, 0.0));
    }

    #[test]
    fn degenerate_models_sample_their_atom() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = ReturnModel::Uniform { lo: 1.0, hi: 1.0 };
        for _ in 0..10 {
            assert_eq!(sample_return(&u, &mut rng), 1.0);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = ReturnModel::Lognormal { mu: 0.0, sigma: 0.1 };
        let a = sample_return(&m, &mut ChaCha8Rng::seed_from_u64(17));
        let b = sample_return(&m, &mut ChaCha8Rng::seed_from_u64(17));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn schedule_switches_at_shift_steps() {
        let s = ReturnSchedule {
            base: ReturnModel::Uniform { lo: 1.0, hi: 1.0 },
            shifts: vec![ScheduledModel {
                from_step: 5,
                model: ReturnModel::Uniform { lo: 0.9, hi: 0.9 },
            }],
        };
        assert_eq!(s.model_for(4).mean(), 1.0);
        assert_eq!(s.model_for(5).mean(), 0.9);
        assert_eq!(s.model_for(50).mean(), 0.9);
    }
}
