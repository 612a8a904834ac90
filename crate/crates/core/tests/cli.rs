use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn aghf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aghf"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn solve(config: &str, dir: &Path, extra: &[&str]) -> Output {
    let cfg = configs().join(config);
    let mut args = vec!["solve", "--config", cfg.to_str().unwrap(), "--output-dir", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    aghf(&args)
}

#[test]
fn double_integrator_solve_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = solve("double_integrator.toml", dir.path(), &["--seed", "7", "--set", "phase2.degree=12"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let line = String::from_utf8_lossy(&out.stdout);
    assert!(line.starts_with("success=true action="), "{line}");

    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let mut lines = traj.lines();
    assert_eq!(lines.next(), Some("t,q1,qd1"));
    let row: Vec<&str> = lines.nth(1).unwrap().split(',').collect();
    // Full double precision: 17 significant digits in scientific notation.
    assert!(row.iter().all(|c| c.split('e').next().unwrap().trim_start_matches('-').len() == 18), "{row:?}");
    assert!(!traj.contains('\r'));

    let control = std::fs::read_to_string(dir.path().join("control.csv")).unwrap();
    assert!(control.starts_with("t,u1\n"));
    let trace = std::fs::read_to_string(dir.path().join("flow_trace_phase2.csv")).unwrap();
    assert!(trace.starts_with("s,action,rhs_norm,violation\n"));
    assert!(!dir.path().join("flow_trace_phase1.csv").exists());

    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["success"], Value::Bool(true));
    assert_eq!(summary["config"]["seed"], 7);
    assert_eq!(summary["config"]["phase2"]["degree"], 12);
    assert_eq!(summary["phases"]["phase1_skipped"], Value::Bool(true));
    let keys: Vec<&String> = summary.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn mismatched_chain_dimensions_exit_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        "[system]\nkind = \"planar_chain\"\nmasses = [1.0, 1.0]\nlengths = [1.0]\n\n[task]\nx0 = [0.0, 0.0, 0.0, 0.0]\nxf = [1.0, 0.0, 0.0, 0.0]\nhorizon = 1.0\n",
    )
    .unwrap();
    let out = aghf(&["solve", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("system.lengths"), "{}", stderr(&out));
    assert!(!dir.path().join("summary.json").exists());
}

#[test]
fn bad_overrides_and_missing_files_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = solve("double_integrator.toml", dir.path(), &["--set", "phase2.kd=-5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("phase2.kd"));
    let out = aghf(&["solve", "--config", "/definitely/not/here.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let out = aghf(&["solve"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn infeasible_goal_reports_solver_failure_without_panicking() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("blocked.toml");
    std::fs::write(
        &cfg,
        r#"
[system]
kind = "double_integrator"
dof = 1

[task]
x0 = [0.0, 0.0]
xf = [1.0, 0.0]
horizon = 1.0

[[constraints]]
kind = "circle_obstacle"
center = [1.0, 0.0]
radius = 0.2
k = 1e4

[phase1.solver]
s_max = 0.2
"#,
    )
    .unwrap();
    let out = aghf(&["solve", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap()]);
    let code = out.status.code();
    assert!(code == Some(2) || code == Some(3), "exit {code:?}: {}", stderr(&out));
    assert!(!stderr(&out).contains("panicked"));
    assert!(stderr(&out).contains("phase 1"), "{}", stderr(&out));
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["status"], "solver_failure");
    assert!(dir.path().join("nodes.csv").exists());
}

#[test]
fn evaluate_round_trip_and_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let solved = dir.path().join("solve");
    let out = solve("pendulum.toml", &solved, &["--quiet"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    let cfg = configs().join("pendulum.toml");
    let cfg = cfg.to_str().unwrap();

    let eval_dir = dir.path().join("eval");
    let out = aghf(&["evaluate", "--config", cfg, "--solution", solved.to_str().unwrap(), "--output-dir", eval_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let original = read_json(&solved.join("summary.json"))["verdict"].clone();
    let replayed = read_json(&eval_dir.join("verdict.json"));
    assert_eq!(original, replayed);

    // Scale the control column by ten.
    let tampered = dir.path().join("tampered");
    std::fs::create_dir_all(&tampered).unwrap();
    std::fs::copy(solved.join("trajectory.csv"), tampered.join("trajectory.csv")).unwrap();
    let control = std::fs::read_to_string(solved.join("control.csv")).unwrap();
    let mut lines = control.lines();
    let mut text = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let (t, u) = line.split_once(',').unwrap();
        text.push_str(&format!("{t},{:.16e}\n", 10.0 * u.parse::<f64>().unwrap()));
    }
    std::fs::write(tampered.join("control.csv"), text).unwrap();
    let out = aghf(&["evaluate", "--config", cfg, "--solution", tampered.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let verdict = read_json(&tampered.join("verdict.json"));
    assert_eq!(verdict["constraints_ok"], Value::Bool(false));

    let out = aghf(&["evaluate", "--config", cfg, "--solution", dir.path().join("nothing").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_over_kd_shows_shrinking_defect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("double_integrator.toml");
    let out = aghf(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        dir.path().to_str().unwrap(),
        "--param",
        "phase2.kd",
        "--values",
        "1e2,1e4,1e6",
        "--repeat",
        "3",
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    let defects: Vec<f64> = rows.iter().map(|r| r[col("defect_mean")].parse().unwrap()).collect();
    assert!(defects[0] > defects[1] && defects[1] > defects[2], "{defects:?}");
    for r in &rows {
        assert_eq!(r[col("runs")], "3");
        for name in ["action_std", "defect_std", "wall_time_std"] {
            assert!(r[col(name)].parse::<f64>().unwrap().is_finite());
        }
    }
    assert!(dir.path().join("000_1e2/rep2/trajectory.csv").exists());
}

#[test]
fn sweep_rejects_empty_value_list_and_bad_values() {
    let cfg = configs().join("double_integrator.toml");
    let cfg = cfg.to_str().unwrap();
    let out = aghf(&["sweep", "--config", cfg, "--param", "phase2.kd", "--values", ""]);
    assert_eq!(out.status.code(), Some(1));
    let out = aghf(&["sweep", "--config", cfg, "--param", "phase2.kd", "--values", "1e2,-3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("phase2.kd"));
}
