//! Adaptive panel-refined Gauss-Legendre integration of scalar and small
//! vector-valued integrands.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureSpec {
    /// Gauss-Legendre nodes per panel.
    pub nodes: usize,
    /// Maximum number of halvings of an initial panel.
    pub max_depth: usize,
    pub rel_tol: f64,
    /// Absolute tolerance, in the integrand's natural unit.
    pub abs_tol: f64,
    /// Probability mass left out when an open upper tail is truncated.
    pub tail_mass: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            nodes: 16,
            max_depth: 40,
            rel_tol: 1e-9,
            abs_tol: 1e-13,
            tail_mass: 1e-12,
        }
    }
}

/// Nodes and weights on [-1, 1].
#[derive(Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Computes the rule by Newton iteration on the Legendre polynomial.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Shared rule for `n` nodes, cached per thread.
    pub fn cached(n: usize) -> Rc<GaussLegendre> {
        thread_local! {
            static RULES: RefCell<HashMap<usize, Rc<GaussLegendre>>> = RefCell::new(HashMap::new());
        }
        RULES.with(|r| {
            r.borrow_mut()
                .entry(n)
                .or_insert_with(|| Rc::new(GaussLegendre::new(n)))
                .clone()
        })
    }
}

/// P_n(x) and P_n'(x) by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integral estimate with its accumulated error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate<const K: usize> {
    pub value: [f64; K],
    pub error: [f64; K],
}

fn panel<const K: usize, F>(rule: &GaussLegendre, f: &mut F, a: f64, b: f64) -> Result<[f64; K]>
where
    F: FnMut(f64) -> Result<[f64; K]>,
{
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = [0.0; K];
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        let v = f(mid + half * x)?;
        for k in 0..K {
            acc[k] += w * v[k];
        }
    }
    for v in acc.iter_mut() {
        *v *= half;
    }
    Ok(acc)
}

/// A panel with its two-level estimate.
struct Panel<const K: usize> {
    a: f64,
    b: f64,
    depth: usize,
    /// Sum of the two half-panel rules.
    value: [f64; K],
    /// Halves, kept so a split costs two new panel evaluations, not four.
    halves: [[f64; K]; 2],
    error: [f64; K],
    /// Largest component error relative to its tolerance scale.
    priority: f64,
}

impl<const K: usize> PartialEq for Panel<K> {
    fn eq(&self, other: &Self) -> bool {
        self.priority == other.priority
    }
}
impl<const K: usize> Eq for Panel<K> {}
impl<const K: usize> PartialOrd for Panel<K> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<const K: usize> Ord for Panel<K> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.priority.total_cmp(&other.priority)
    }
}

/// Integrates `f` over consecutive intervals delimited by `breaks`.
///
/// Globally adaptive: the panel with the largest error estimate (difference
/// between one rule and two half rules) is split until, for every component,
/// the summed error is at most `max(rel_tol·|I_k|, abs_tol_k)`. Known kinks or
/// jumps of the integrand should be passed as break points; those that are
/// not cost refinement only in proportion to their contribution.
pub fn integrate<const K: usize, F>(
    mut f: F,
    breaks: &[f64],
    spec: &QuadratureSpec,
    abs_tol: [f64; K],
) -> Result<Estimate<K>>
where
    F: FnMut(f64) -> Result<[f64; K]>,
{
    let rule = GaussLegendre::cached(spec.nodes);
    let mut value = [0.0; K];
    let mut error = [0.0; K];
    if breaks.len() < 2 || !(breaks[breaks.len() - 1] > breaks[0]) {
        return Ok(Estimate { value, error });
    }

    let mut scale = [0.0; K];
    let make = |a: f64, b: f64, depth: usize, whole: [f64; K], f: &mut F, scale: &[f64; K]| -> Result<Panel<K>> {
        let m = 0.5 * (a + b);
        let left = panel(&rule, f, a, m)?;
        let right = panel(&rule, f, m, b)?;
        let mut value = [0.0; K];
        let mut error = [0.0; K];
        let mut priority = 0.0f64;
        for k in 0..K {
            value[k] = left[k] + right[k];
            error[k] = (value[k] - whole[k]).abs();
            priority = priority.max(error[k] / scale[k]);
        }
        Ok(Panel {
            a,
            b,
            depth,
            value,
            halves: [left, right],
            error,
            priority,
        })
    };

    let mut wholes = Vec::new();
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            let whole = panel(&rule, &mut f, w[0], w[1])?;
            for k in 0..K {
                scale[k] += whole[k].abs();
            }
            wholes.push((w[0], w[1], whole));
        }
    }
    for k in 0..K {
        scale[k] = (spec.rel_tol * scale[k]).max(abs_tol[k]).max(f64::MIN_POSITIVE);
    }

    let mut heap = std::collections::BinaryHeap::new();
    for (a, b, whole) in wholes {
        let p = make(a, b, 0, whole, &mut f, &scale)?;
        for k in 0..K {
            value[k] += p.value[k];
            error[k] += p.error[k];
        }
        heap.push(p);
    }
    let converged = |value: &[f64; K], error: &[f64; K]| {
        (0..K).all(|k| error[k] <= (spec.rel_tol * value[k].abs()).max(abs_tol[k]))
    };
    let mut settled = Vec::new();
    while !converged(&value, &error) {
        let Some(p) = heap.pop() else {
            break;
        };
        let m = 0.5 * (p.a + p.b);
        if p.depth >= spec.max_depth || m <= p.a || m >= p.b {
            // At the resolution limit; its error stays in the total.
            settled.push(p);
            continue;
        }
        let left = make(p.a, m, p.depth + 1, p.halves[0], &mut f, &scale)?;
        let right = make(m, p.b, p.depth + 1, p.halves[1], &mut f, &scale)?;
        for k in 0..K {
            value[k] += left.value[k] + right.value[k] - p.value[k];
            error[k] += left.error[k] + right.error[k] - p.error[k];
        }
        heap.push(left);
        heap.push(right);
    }
    // Re-sum in panel order to shed the rounding of the running updates.
    settled.extend(heap.into_vec());
    settled.sort_by(|x, y| x.a.total_cmp(&y.a));
    value = [0.0; K];
    error = [0.0; K];
    for p in &settled {
        for k in 0..K {
            value[k] += p.value[k];
            error[k] += p.error[k];
        }
    }
    for k in 0..K {
        let allowed = (spec.rel_tol * value[k].abs()).max(abs_tol[k]);
        if error[k] > allowed {
            return Err(Error::IntegrationAccuracy {
                achieved: error[k],
                requested: allowed,
            });
        }
    }
    Ok(Estimate { value, error })
}

/// Scalar convenience wrapper around [`integrate`].
pub fn integrate_scalar<F>(mut f: F, breaks: &[f64], spec: &QuadratureSpec, abs_tol: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let est = integrate(|x| f(x).map(|v| [v]), breaks, spec, [abs_tol])?;
    Ok((est.value[0], est.error[0]))
}
