//! End-to-end checks of the `stbl` binary: artifacts, determinism, replay,
//! tamper detection and exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

const BASE: &str = r#"
seed = 11
paths = 40
horizon = 30
[params]
demand = 100
alpha = 1.13
[initial]
x = 1.0
l = 100.0
n = 400.0
[returns]
base = { kind = "lognormal", mu = 0.0, sigma = 0.04 }
[detectors]
after_tau = false
[analysis]
variance_draws = 200
"#;

fn stbl(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_stbl")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn run_into(cfg: &str, out: &Path, extra: &[&str]) -> i32 {
    let out = out.to_string_lossy().into_owned();
    let mut args = vec!["run", "--config", cfg, "--out", &out];
    args.extend_from_slice(extra);
    let (code, _, err) = stbl(&args);
    assert!(code == 0 || code == 2, "run failed: {err}");
    code
}

fn data_rows(csv: &Path) -> Vec<String> {
    fs::read_to_string(csv)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn single_path_single_step_writes_one_row_pair_and_a_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let out = dir.path().join("out");
    run_into(&cfg, &out, &["--paths", "1", "--horizon", "1"]);
    assert_eq!(data_rows(&out.join("trajectories.csv")).len(), 2);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_paths"], 1);
    assert_eq!(report["seed"], 11);
    // Too few paths for an empirical tail estimate; the reason is recorded.
    assert!(report["empirical_bounds"]["max_deviation"]["unavailable"].is_string());
}

#[test]
fn identical_inputs_give_byte_identical_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_into(&cfg, &a, &[]);
    run_into(&cfg, &b, &[]);
    for f in ["trajectories.csv", "report.json", "fan.csv", "deviation.csv"] {
        assert!(
            fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let c = dir.path().join("c");
    run_into(&cfg, &c, &["--seed", "12"]);
    assert_ne!(
        fs::read(a.join("trajectories.csv")).unwrap(),
        fs::read(c.join("trajectories.csv")).unwrap()
    );
    let head = fs::read_to_string(c.join("trajectories.csv")).unwrap();
    assert!(head.lines().any(|l| l == "# seed = 12"));
}

#[test]
fn report_carries_the_worked_bounds() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let (code, stdout, _) = stbl(&["bounds", "--config", &cfg]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let doob = v["doob_max_deviation"]["ok"].as_f64().unwrap();
    let qv = v["burkholder_sqrt_qv"]["ok"].as_f64().unwrap();
    assert!((doob - 0.042).abs() <= 5e-4, "{doob}");
    assert!((qv - 0.127).abs() <= 5e-4, "{qv}");

    let out = dir.path().join("out");
    run_into(&cfg, &out, &["--paths", "100"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let emp = &report["empirical_bounds"]["max_deviation"]["ok"];
    assert_eq!(emp["theoretical"].as_f64().unwrap(), doob);
    assert!(emp["empirical"].is_f64());
}

#[test]
fn replay_passes_and_catches_a_tampered_price() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let out = dir.path().join("out");
    run_into(&cfg, &out, &[]);
    let outs = out.to_string_lossy().into_owned();
    let (code, stdout, err) = stbl(&["replay", "--config", &cfg, "--out", &outs]);
    assert_eq!(code, 0, "{stdout}{err}");

    let table = out.join("trajectories.csv");
    let text = fs::read_to_string(&table).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let header_lines = lines.iter().take_while(|l| l.starts_with('#')).count() + 1;
    let target = 17;
    let mut cells: Vec<String> = lines[header_lines + target].split(',').map(str::to_string).collect();
    let z: f64 = cells[7].parse().unwrap();
    cells[7] = (z * (1.0 + 1e-6)).to_string();
    lines[header_lines + target] = cells.join(",");
    fs::write(&table, lines.join("\n") + "\n").unwrap();
    let (code, stdout, _) = stbl(&["replay", "--config", &cfg, "--out", &outs]);
    assert_eq!(code, 3);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let first = &v["summary"]["mismatches"][0];
    assert_eq!(first["row"], target);
    assert_eq!(first["field"], "z");
}

#[test]
fn rescaled_run_replays_against_the_base_prices() {
    let dir = TempDir::new().unwrap();
    let base = write_config(dir.path(), "base.toml", BASE);
    let gamma = 3.7;
    let scaled_body = BASE
        .replace("demand = 100", &format!("demand = {}", 100.0 * gamma))
        .replace("l = 100.0", &format!("l = {}", 100.0 * gamma))
        .replace("n = 400.0", &format!("n = {}", 400.0 * gamma))
        .replace("[params]\n", &format!("[params]\nv_floor = {}\n", 1e-6 * gamma));
    let scaled = write_config(dir.path(), "scaled.toml", &scaled_body);
    let (b, s) = (dir.path().join("b"), dir.path().join("s"));
    run_into(&base, &b, &[]);
    run_into(&scaled, &s, &[]);
    let against = b.join("trajectories.csv").to_string_lossy().into_owned();
    let ss = s.to_string_lossy().into_owned();
    let (code, stdout, _) = stbl(&["replay", "--config", &scaled, "--out", &ss, "--against", &against]);
    assert_eq!(code, 0, "{stdout}");
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = TempDir::new().unwrap();
    let bad = write_config(dir.path(), "bad.toml", "[params]\nbeta = 0.9\n");
    let (code, _, err) = stbl(&["bounds", "--config", &bad]);
    assert_eq!(code, 1);
    assert!(err.contains("params.beta") && err.contains("β > 1"), "{err}");

    let typo = write_config(dir.path(), "typo.toml", "pathz = 3\n");
    assert_eq!(stbl(&["run", "--config", &typo]).0, 1);
    assert_eq!(stbl(&["run"]).0, 1);
    assert_eq!(stbl(&["--help"]).0, 0);

    // With r = 1/κ = 1 every bound is zero, while a rising ETH price pushes
    // supply up and the stablecoin price below par: strict mode must object.
    let tight = BASE
        .replace("alpha = 1.13", "alpha = 1.13\nkappa = 1.0\nr_bound = 1.0")
        .replace("mu = 0.0,", "mu = 0.01,")
        .replace("[analysis]", "[analysis]\nepsilon = 0.001");
    let tight = write_config(dir.path(), "tight.toml", &tight);
    let out = dir.path().join("t");
    assert_eq!(run_into(&tight, &out, &["--paths", "100", "--strict"]), 2);
    assert_eq!(run_into(&tight, &out, &["--paths", "100"]), 0);
}

#[test]
fn check_assumptions_reports_every_condition() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let (code, stdout, _) = stbl(&["check-assumptions", "--config", &cfg]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), 11);
}

#[test]
fn shipped_configs_are_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["stable.toml", "crisis.toml"] {
        let path = root.join(name).to_string_lossy().into_owned();
        let (code, _, err) = stbl(&["bounds", "--config", &path]);
        assert_eq!(code, 0, "{name}: {err}");
    }
}
