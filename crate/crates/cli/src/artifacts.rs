//! CSV artifacts: trajectories, deviation series and quantile fans. Every
//! file opens with a `#` comment block carrying the seed and config digest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use stbl_core::analysis::{quantile_fan, DeviationSeries, Quantity, StopRule};
use stbl_core::dynamics::{Stop, Trajectory};
use stbl_core::model::{LiquidationKind, PathStatus, SystemState};

use crate::error::CliError;

pub const TRAJECTORIES: &str = "trajectories.csv";
pub const DEVIATION: &str = "deviation.csv";
pub const FAN: &str = "fan.csv";
pub const REPORT: &str = "report.json";
pub const CONFIG: &str = "config.toml";

/// Identity of the run an artifact came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_sha256: String,
}

/// One `(path, step)` row of the trajectory table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub path: u64,
    pub t: usize,
    pub x: f64,
    pub l: f64,
    pub supply: f64,
    pub n: f64,
    pub nbar: f64,
    pub z: f64,
    pub y: f64,
    pub status: String,
    pub liquidation: String,
    /// Stablecoins repurchased by the liquidation into this state.
    pub liquidated: f64,
    pub e_inv_supply: Option<f64>,
    pub e_supply: Option<f64>,
    pub e_price: Option<f64>,
    /// Stop labels separated by `;`.
    pub stops: String,
}

impl TrajectoryRow {
    fn new(traj: &Trajectory, k: usize) -> Self {
        let s = &traj.states[k];
        let e = &traj.events[k];
        let c = e.conditional;
        Self {
            path: traj.stream,
            t: s.t,
            x: s.x,
            l: s.l,
            supply: s.supply,
            n: s.n,
            nbar: s.nbar,
            z: s.z,
            y: s.y,
            status: s.status.as_str().to_string(),
            liquidation: e.liquidation.kind.as_str().to_string(),
            liquidated: e.liquidation.ell,
            e_inv_supply: c.map(|c| c.e_inv_supply),
            e_supply: c.map(|c| c.e_supply),
            e_price: c.map(|c| c.e_price),
            stops: e.stops.iter().map(Stop::label).collect::<Vec<_>>().join(";"),
        }
    }

    /// The state this row records.
    pub fn state(&self) -> Result<SystemState, String> {
        Ok(SystemState {
            t: self.t,
            x: self.x,
            l: self.l,
            supply: self.supply,
            n: self.n,
            nbar: self.nbar,
            z: self.z,
            y: self.y,
            status: parse_status(&self.status)?,
        })
    }

    pub fn liquidation_kind(&self) -> Result<LiquidationKind, String> {
        match self.liquidation.as_str() {
            "none" => Ok(LiquidationKind::None),
            "partial" => Ok(LiquidationKind::Partial),
            "wipeout" => Ok(LiquidationKind::Wipeout),
            other => Err(format!("unknown liquidation kind `{other}`")),
        }
    }

    pub fn stop_list(&self) -> Result<Vec<Stop>, String> {
        self.stops
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| Stop::parse(s).ok_or_else(|| format!("unknown stop `{s}`")))
            .collect()
    }
}

fn parse_status(s: &str) -> Result<PathStatus, String> {
    [
        PathStatus::Active,
        PathStatus::WipedOut,
        PathStatus::Insolvent,
        PathStatus::SupplyFloor,
    ]
    .into_iter()
    .find(|p| p.as_str() == s)
    .ok_or_else(|| format!("unknown status `{s}`"))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    let f = File::create(path).map_err(CliError::io(format!("creating {}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn header(w: &mut impl Write, title: &str, prov: &Provenance) -> std::io::Result<()> {
    writeln!(w, "# {title}")?;
    writeln!(w, "# seed = {}", prov.seed)?;
    writeln!(w, "# config_sha256 = {}", prov.config_sha256)
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Artifact {
        file: path.display().to_string(),
        message: e.to_string(),
    }
}

fn finish(w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<(), CliError> {
    let mut inner = w.into_inner().map_err(|e| CliError::Artifact {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    inner
        .flush()
        .map_err(CliError::io(format!("writing {}", path.display())))
}

/// Writes every state of every path, paths in ensemble order.
pub fn write_trajectories(path: &Path, ensemble: &[Trajectory], prov: &Provenance) -> Result<(), CliError> {
    let mut out = create(path)?;
    header(&mut out, "stbl trajectories", prov).map_err(CliError::io(format!("writing {}", path.display())))?;
    let mut w = csv::Writer::from_writer(out);
    for traj in ensemble {
        for k in 0..traj.states.len() {
            w.serialize(TrajectoryRow::new(traj, k)).map_err(csv_error(path))?;
        }
    }
    finish(w, path)
}

/// Reads the provenance block at the top of an artifact.
pub fn read_provenance(path: &Path) -> Result<Provenance, CliError> {
    let f = File::open(path).map_err(CliError::io(format!("opening {}", path.display())))?;
    let mut seed = None;
    let mut digest = None;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(CliError::io(format!("reading {}", path.display())))?;
        let Some(rest) = line.strip_prefix('#') else { break };
        if let Some((k, v)) = rest.split_once('=') {
            match k.trim() {
                "seed" => seed = v.trim().parse().ok(),
                "config_sha256" => digest = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    match (seed, digest) {
        (Some(seed), Some(config_sha256)) => Ok(Provenance { seed, config_sha256 }),
        _ => Err(CliError::Artifact {
            file: path.display().to_string(),
            message: "missing seed or config digest in the header".into(),
        }),
    }
}

pub fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryRow>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_error(path))?;
    r.deserialize().map(|row| row.map_err(csv_error(path))).collect()
}

#[derive(Serialize)]
struct DeviationRow {
    path: u64,
    t: usize,
    deviation: f64,
    running_max: f64,
    running_qv: f64,
}

/// Deviation `|m − Z|`, its running maximum and running quadratic variation
/// along each path's stopped segment.
pub fn write_deviation(
    path: &Path,
    ensemble: &[Trajectory],
    m: f64,
    rule: &StopRule,
    prov: &Provenance,
) -> Result<(), CliError> {
    let mut out = create(path)?;
    header(
        &mut out,
        &format!("stbl deviation from m = {m}, stopped per rule"),
        prov,
    )
    .map_err(CliError::io(format!("writing {}", path.display())))?;
    let mut w = csv::Writer::from_writer(out);
    for traj in ensemble {
        let Some(series) = DeviationSeries::from_trajectory(traj, m, rule) else {
            continue;
        };
        let start = series.stopped_at + 1 - series.values.len();
        let (mut max, mut qv) = (0.0f64, 0.0);
        for (i, &d) in series.values.iter().enumerate() {
            max = max.max(d);
            if i > 0 {
                qv += (d - series.values[i - 1]).powi(2);
            }
            w.serialize(DeviationRow {
                path: traj.stream,
                t: start + i,
                deviation: d,
                running_max: max,
                running_qv: qv,
            })
            .map_err(csv_error(path))?;
        }
    }
    finish(w, path)
}

/// Per-step ensemble quantiles of the price and the supply.
pub fn write_fan(path: &Path, ensemble: &[Trajectory], probs: &[f64], prov: &Provenance) -> Result<(), CliError> {
    let mut out = create(path)?;
    header(&mut out, "stbl ensemble quantile fans", prov)
        .map_err(CliError::io(format!("writing {}", path.display())))?;
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["quantity".to_string(), "t".to_string()];
    head.extend(probs.iter().map(|p| format!("q{p}")));
    w.write_record(&head).map_err(csv_error(path))?;
    for (name, q) in [("price", Quantity::Price), ("supply", Quantity::Supply)] {
        for (t, row) in quantile_fan(ensemble, q, probs).iter().enumerate() {
            let mut rec = vec![name.to_string(), t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_error(path))?;
        }
    }
    finish(w, path)
}
