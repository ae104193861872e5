//! Re-derives every recorded state from its predecessor and the realized
//! return, and checks the clearing identities and stop flags row by row.

use serde::Serialize;
use stbl_core::dynamics::{detect_stops, step_with_return, ConditionalExpectations};
use stbl_core::model::SystemState;

use crate::artifacts::TrajectoryRow;
use crate::config::RunConfig;

/// Relative tolerance for recomputed values.
pub const REPLAY_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    /// Zero-based index among the data rows.
    pub row: usize,
    pub path: u64,
    pub t: usize,
    pub field: String,
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplaySummary {
    pub rows: usize,
    pub paths: usize,
    pub mismatches: Vec<Mismatch>,
}

impl ReplaySummary {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-300
}

struct Checker<'a> {
    out: &'a mut Vec<Mismatch>,
    row: usize,
    path: u64,
    t: usize,
}

impl Checker<'_> {
    fn push(&mut self, field: &str, expected: String, found: String) {
        self.out.push(Mismatch {
            row: self.row,
            path: self.path,
            t: self.t,
            field: field.to_string(),
            expected,
            found,
        });
    }

    fn num(&mut self, field: &str, expected: f64, found: f64, rel: f64) {
        if !close(expected, found, rel) {
            self.push(field, expected.to_string(), found.to_string());
        }
    }

    fn state(&mut self, expected: &SystemState, found: &SystemState) {
        let pairs = [
            ("x", expected.x, found.x),
            ("l", expected.l, found.l),
            ("supply", expected.supply, found.supply),
            ("n", expected.n, found.n),
            ("nbar", expected.nbar, found.nbar),
            ("z", expected.z, found.z),
            ("y", expected.y, found.y),
        ];
        // Scale for absolute slack: quantities near zero are compared against
        // the size of the balance sheet.
        let scale = expected.supply.abs().max(expected.n.abs() * expected.x.abs()).max(1.0);
        for (field, e, f) in pairs {
            if (e - f).abs() > REPLAY_REL_TOL * e.abs().max(f.abs()) + 1e-12 * scale {
                self.push(field, e.to_string(), f.to_string());
            }
        }
        if expected.status != found.status {
            self.push("status", expected.status.as_str().into(), found.status.as_str().into());
        }
    }
}

/// Replays `rows` (a trajectory table, paths in order) under `cfg`.
pub fn replay(rows: &[TrajectoryRow], cfg: &RunConfig) -> ReplaySummary {
    let p = &cfg.params;
    let mut out = Vec::new();
    let mut paths = 0;
    let mut s1_seen = false;
    for (i, row) in rows.iter().enumerate() {
        let mut c = Checker {
            out: &mut out,
            row: i,
            path: row.path,
            t: row.t,
        };
        let state = match row.state() {
            Ok(s) => s,
            Err(e) => {
                c.push("status", "a known status".into(), e);
                continue;
            }
        };
        let kind = match row.liquidation_kind() {
            Ok(k) => k,
            Err(e) => {
                c.push("liquidation", "a known kind".into(), e);
                continue;
            }
        };

        if row.t == 0 {
            paths += 1;
            s1_seen = false;
            match cfg.initial.state(p) {
                Ok(s0) => c.state(&s0, &state),
                Err(e) => c.push("initial", "a valid initial state".into(), e.to_string()),
            }
        } else {
            let prev = i.checked_sub(1).map(|j| &rows[j]);
            match prev {
                Some(prev) if prev.path == row.path && prev.t + 1 == row.t => {
                    if let Ok(prev_state) = prev.state() {
                        let r = if prev_state.x > 0.0 { row.x / prev_state.x } else { 0.0 };
                        let decide = cfg.returns.model_for(prev.t + 2);
                        match step_with_return(&prev_state, r, decide, p, None) {
                            Ok(tr) => {
                                let mut expected = tr.state;
                                // The realized price is the recorded one.
                                expected.x = if prev_state.is_halted() { expected.x } else { row.x };
                                c.state(&expected, &state);
                                if tr.liquidation.kind != kind {
                                    c.push(
                                        "liquidation",
                                        tr.liquidation.kind.as_str().into(),
                                        row.liquidation.clone(),
                                    );
                                }
                                c.num("liquidated", tr.liquidation.ell, row.liquidated, REPLAY_REL_TOL);
                            }
                            Err(e) => c.push("transition", "a valid step".into(), e.to_string()),
                        }
                    }
                }
                _ => c.push("t", "consecutive steps within a path".into(), row.t.to_string()),
            }
        }

        // Identities that hold at every recorded state.
        c.num("supply", p.zeta + state.l, state.supply, 1e-12);
        if !state.is_halted() {
            c.num("z", p.curve().price(state.supply), state.z, 1e-12);
            let y = state.n * state.x - state.l;
            if (y - state.y).abs() > 1e-12 * (state.n * state.x).abs().max(state.l.abs()).max(1.0) {
                c.push("y", y.to_string(), state.y.to_string());
            }
        }

        let cond = match (row.e_inv_supply, row.e_supply, row.e_price) {
            (Some(e_inv_supply), Some(e_supply), Some(e_price)) => Some(ConditionalExpectations {
                e_inv_supply,
                e_supply,
                e_price,
            }),
            (None, None, None) => None,
            _ => {
                c.push(
                    "e_supply",
                    "all or none of the expectations".into(),
                    "a partial set".into(),
                );
                None
            }
        };
        if let Some(ce) = cond {
            if ce.e_inv_supply * ce.e_supply < 1.0 - 1e-9 {
                c.push(
                    "e_inv_supply",
                    "E[1/S]·E[S] >= 1".into(),
                    (ce.e_inv_supply * ce.e_supply).to_string(),
                );
            }
        }
        let stops = detect_stops(
            &state,
            cond.as_ref(),
            &cfg.detectors.m_levels,
            s1_seen,
            p.numerics.detector_rel_tol,
        );
        match row.stop_list() {
            Ok(recorded) if recorded == stops => {}
            Ok(_) | Err(_) => {
                let want: Vec<String> = stops.iter().map(|s| s.label()).collect();
                c.push("stops", want.join(";"), row.stops.clone());
            }
        }
        if stops.contains(&stbl_core::dynamics::Stop::S1) {
            s1_seen = true;
        }
    }
    ReplaySummary {
        rows: rows.len(),
        paths,
        mismatches: out,
    }
}

/// Compares the price columns of two tables row by row.
pub fn compare_prices(rows: &[TrajectoryRow], against: &[TrajectoryRow], rel_tol: f64) -> Vec<Mismatch> {
    let mut out = Vec::new();
    if rows.len() != against.len() {
        out.push(Mismatch {
            row: rows.len().min(against.len()),
            path: 0,
            t: 0,
            field: "rows".into(),
            expected: against.len().to_string(),
            found: rows.len().to_string(),
        });
    }
    for (i, (a, b)) in rows.iter().zip(against).enumerate() {
        if a.path != b.path || a.t != b.t {
            out.push(Mismatch {
                row: i,
                path: a.path,
                t: a.t,
                field: "path/t".into(),
                expected: format!("{}/{}", b.path, b.t),
                found: format!("{}/{}", a.path, a.t),
            });
        } else if !close(a.z, b.z, rel_tol) {
            out.push(Mismatch {
                row: i,
                path: a.path,
                t: a.t,
                field: "z".into(),
                expected: b.z.to_string(),
                found: a.z.to_string(),
            });
        }
    }
    out
}
