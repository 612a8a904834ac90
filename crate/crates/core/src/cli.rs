//! Command-line front end: `solve`, `evaluate` and `sweep`.
//!
//! Exit codes: 0 success, 1 config or input error, 2 solver failure,
//! 3 success criteria not met.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use nalgebra::DVector;
use serde_json::{json, Value};

use crate::config::{describe, OutputFormat, ProblemConfig};
use crate::error::AghfError;
use crate::evaluation::{build_report, closed_loop_integrate, evaluate_success, DenseSolution, SolveReport, Verdict};
use crate::flow::{solve_phase1_phase2, FlowTrace, Trajectory};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_CRITERIA: i32 = 3;

pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const CONTROL_CSV: &str = "control.csv";
pub const NODES_CSV: &str = "nodes.csv";
pub const CLOSED_LOOP_CSV: &str = "closed_loop.csv";
pub const TRACE_PHASE1_CSV: &str = "flow_trace_phase1.csv";
pub const TRACE_PHASE2_CSV: &str = "flow_trace_phase2.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const VERDICT_JSON: &str = "verdict.json";
pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Debug, Parser)]
#[command(name = "aghf", version, about = "Trajectory optimization by affine geometric heat flow")]
pub struct Cli {
    /// Suppress the one-line summary on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the problem described by a config file and write artifacts.
    Solve(CommonArgs),
    /// Re-run closed-loop evaluation on a saved solution.
    Evaluate(EvaluateArgs),
    /// Solve repeatedly while varying one config parameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML problem description.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config entry, e.g. `--set phase2.kd=1e6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory holding `trajectory.csv` and `control.csv` from a previous solve.
    #[arg(long)]
    pub solution: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dotted config path to vary, e.g. `phase2.kd`.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
}

/// Parses `args` and runs the command. Never panics on bad input.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Solve(args) => cmd_solve(&args, cli.quiet),
        Command::Evaluate(args) => cmd_evaluate(&args, cli.quiet),
        Command::Sweep(args) => cmd_sweep(&args, cli.quiet),
    }
}

fn load_config(args: &CommonArgs) -> Result<ProblemConfig, AghfError> {
    let mut cfg = ProblemConfig::load(&args.config, &args.overrides)?;
    apply_cli_settings(&mut cfg, args);
    Ok(cfg)
}

fn apply_cli_settings(cfg: &mut ProblemConfig, args: &CommonArgs) {
    if let Some(dir) = &args.output_dir {
        cfg.output.directory = dir.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
}

/// Outcome of one solve, as recorded by `sweep`.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub success: bool,
    pub action: Option<f64>,
    pub defect: Option<f64>,
    pub wall_time: f64,
    pub message: String,
}

pub fn cmd_solve(args: &CommonArgs, quiet: bool) -> i32 {
    let cfg = match load_config(args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let outcome = solve_config(&cfg);
    if !quiet && outcome.exit_code != EXIT_CONFIG {
        println!("{}", outcome.message);
    }
    outcome.exit_code
}

/// Solves a validated config and writes every artifact to its output directory.
pub fn solve_config(cfg: &ProblemConfig) -> RunOutcome {
    let start = Instant::now();
    let fail = |code: i32, message: String| RunOutcome {
        exit_code: code,
        success: false,
        action: None,
        defect: None,
        wall_time: start.elapsed().as_secs_f64(),
        message,
    };
    let problem = match cfg.to_problem() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return fail(EXIT_CONFIG, format!("config error: {e}"));
        }
    };
    let dir = &cfg.output.directory;
    if let Err(e) = fs::create_dir_all(dir) {
        eprintln!("error: cannot create output directory {}: {e}", dir.display());
        return fail(EXIT_CONFIG, format!("output error: {e}"));
    }
    info!("solving {}", describe(cfg));

    let solution = match solve_phase1_phase2(&problem) {
        Ok(s) => s,
        Err(e) => {
            let message = format!("success=false status=solver_failure error=\"{e}\"");
            eprintln!("error: {e}");
            report_failure(cfg, &e);
            return fail(EXIT_SOLVER, message);
        }
    };
    let report = match build_report(&problem, solution, &cfg.evaluation, cfg.seed) {
        Ok(r) => r,
        Err(e) => {
            // A diverging closed loop means the plan could not be tracked.
            let code = if matches!(e, AghfError::Divergence { .. }) { EXIT_CRITERIA } else { EXIT_SOLVER };
            eprintln!("error: evaluation failed: {e}");
            report_failure(cfg, &e);
            return fail(code, format!("success=false status=evaluation_failure error=\"{e}\""));
        }
    };
    let wall_time = start.elapsed().as_secs_f64();
    if let Err(e) = write_solution(cfg, &report, wall_time) {
        eprintln!("error: writing outputs: {e}");
        return fail(EXIT_CONFIG, format!("output error: {e}"));
    }
    let success = report.verdict.success;
    if !success {
        warn!("success criteria not met: {:?}", report.verdict);
    }
    let phase1 = match &report.solution.phase1 {
        Some(run) => format!("{:.3}s/{} steps", run.trace.wall_time, run.trace.accepted),
        None => "skipped".to_string(),
    };
    let message = format!(
        "success={success} action={:.6e} defect={:.3e} solve_time={wall_time:.3}s phase1={phase1} phase2={:.3}s/{} steps evaluation={:.3}s",
        report.action,
        report.defect,
        report.timings.phase2,
        report.solution.phase2.trace.accepted,
        report.timings.evaluation,
    );
    RunOutcome {
        exit_code: if success { EXIT_OK } else { EXIT_CRITERIA },
        success,
        action: Some(report.action),
        defect: Some(report.defect),
        wall_time,
        message,
    }
}

fn last_trajectory(e: &AghfError) -> Option<&Trajectory> {
    match e {
        AghfError::StepUnderflow { last, .. }
        | AghfError::MaxSteps { last, .. }
        | AghfError::Phase1Failed { last, .. }
        | AghfError::Phase2Stalled { last, .. } => Some(last),
        _ => None,
    }
}

fn report_failure(cfg: &ProblemConfig, e: &AghfError) {
    let dir = &cfg.output.directory;
    if let Some(last) = last_trajectory(e) {
        if let Err(w) = write_nodes(&dir.join(NODES_CSV), last) {
            error!("could not write last trajectory: {w}");
        }
    }
    if cfg.output.wants(OutputFormat::Json) {
        let summary = json!({
            "status": "solver_failure",
            "success": false,
            "error": e.to_string(),
            "config": config_json(cfg),
        });
        if let Err(w) = write_json(&dir.join(SUMMARY_JSON), &summary) {
            error!("could not write summary: {w}");
        }
    }
}

fn config_json(cfg: &ProblemConfig) -> Value {
    serde_json::to_value(cfg).unwrap_or(Value::Null)
}

fn trace_json(trace: &FlowTrace) -> Value {
    let last = trace.last();
    json!({
        "accepted_steps": trace.accepted,
        "rejected_steps": trace.rejected,
        "action_rejections": trace.action_rejections,
        "steady_state": trace.steady_state,
        "wall_time": trace.wall_time,
        "final_s": last.map(|s| s.s),
        "initial_action": trace.samples.first().map(|s| s.action),
        "final_action": last.map(|s| s.action),
        "final_rhs_norm": last.map(|s| s.rhs_norm),
        "final_violation": last.map(|s| s.violation),
    })
}

pub fn summary_json(cfg: &ProblemConfig, report: &SolveReport, wall_time: f64) -> Value {
    let sol = &report.solution;
    json!({
        "status": if report.verdict.success { "success" } else { "criteria_failed" },
        "success": report.verdict.success,
        "verdict": serde_json::to_value(&report.verdict).unwrap_or(Value::Null),
        "action": report.action,
        "defect": report.defect,
        "max_violation": report.max_violation,
        "phases": {
            "initial_violation": sol.initial_violation,
            "phase1_skipped": sol.phase1_skipped,
            "phase1_violation": sol.phase1_violation,
            "phase1": sol.phase1.as_ref().map(|r| trace_json(&r.trace)),
            "phase2": trace_json(&sol.phase2.trace),
        },
        "timings": {
            "phase1": report.timings.phase1,
            "phase2": report.timings.phase2,
            "evaluation": report.timings.evaluation,
            "total": wall_time,
        },
        "error_bound": serde_json::to_value(report.error_bound).unwrap_or(Value::Null),
        "config": config_json(cfg),
    })
}

fn write_solution(cfg: &ProblemConfig, report: &SolveReport, wall_time: f64) -> std::io::Result<()> {
    let dir = &cfg.output.directory;
    if cfg.output.wants(OutputFormat::Csv) {
        let n = report.solution.trajectory.dof();
        write_dense(&dir.join(TRAJECTORY_CSV), &dir.join(CONTROL_CSV), &report.dense, n)?;
        write_nodes(&dir.join(NODES_CSV), &report.solution.trajectory)?;
        let cl = &report.closed_loop;
        let m = cl.u.first().map_or(0, |u| u.len());
        let mut header = state_header(n);
        header.extend((1..=m).map(|i| format!("u{i}")));
        write_csv(
            &dir.join(CLOSED_LOOP_CSV),
            &header,
            cl.t.iter().zip(&cl.x).zip(&cl.u).map(|((t, x), u)| {
                std::iter::once(*t).chain(x.iter().copied()).chain(u.iter().copied()).collect()
            }),
        )?;
        if let Some(run) = &report.solution.phase1 {
            write_trace(&dir.join(TRACE_PHASE1_CSV), &run.trace)?;
        }
        write_trace(&dir.join(TRACE_PHASE2_CSV), &report.solution.phase2.trace)?;
    }
    if cfg.output.wants(OutputFormat::Json) {
        write_json(&dir.join(SUMMARY_JSON), &summary_json(cfg, report, wall_time))?;
    }
    Ok(())
}

fn state_header(n: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((1..=n).map(|i| format!("q{i}")))
        .chain((1..=n).map(|i| format!("qd{i}")))
        .collect()
}

/// Full-precision CSV: one header line, LF endings, `{:.16e}` numbers.
pub fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> std::io::Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), AghfError> {
    let bad = |msg: String| AghfError::Config(format!("{}: {msg}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
        if row.len() != header.len() {
            return Err(bad(format!("line {}: expected {} columns, got {}", i + 2, header.len(), row.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn write_dense(traj_path: &Path, control_path: &Path, dense: &DenseSolution, n: usize) -> std::io::Result<()> {
    write_csv(
        traj_path,
        &state_header(n),
        dense.t.iter().zip(&dense.x).map(|(t, x)| std::iter::once(*t).chain(x.iter().copied()).collect()),
    )?;
    let m = dense.u.first().map_or(0, |u| u.len());
    let header: Vec<String> = std::iter::once("t".to_string()).chain((1..=m).map(|i| format!("u{i}"))).collect();
    write_csv(
        control_path,
        &header,
        dense.t.iter().zip(&dense.u).map(|(t, u)| std::iter::once(*t).chain(u.iter().copied()).collect()),
    )
}

fn write_nodes(path: &Path, traj: &Trajectory) -> std::io::Result<()> {
    let values = traj.values();
    write_csv(
        path,
        &state_header(traj.dof()),
        traj.grid()
            .nodes()
            .iter()
            .enumerate()
            .map(|(j, t)| std::iter::once(*t).chain(values.row(j).iter().copied()).collect()),
    )
}

pub fn write_trace(path: &Path, trace: &FlowTrace) -> std::io::Result<()> {
    let header = ["s", "action", "rhs_norm", "violation"].map(String::from);
    write_csv(
        path,
        &header,
        trace.samples.iter().map(|s| vec![s.s, s.action, s.rhs_norm, s.violation]),
    )
}

fn write_json(path: &Path, value: &Value) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Reads the dense reference written by `solve`.
pub fn read_dense(dir: &Path, n: usize, m: usize) -> Result<DenseSolution, AghfError> {
    let (th, traj) = read_csv(&dir.join(TRAJECTORY_CSV))?;
    let (ch, ctrl) = read_csv(&dir.join(CONTROL_CSV))?;
    if th.len() != 1 + 2 * n {
        return Err(AghfError::Config(format!(
            "{TRAJECTORY_CSV} has {} columns, the config needs {}",
            th.len(),
            1 + 2 * n
        )));
    }
    if ch.len() != 1 + m {
        return Err(AghfError::Config(format!("{CONTROL_CSV} has {} columns, the config needs {}", ch.len(), 1 + m)));
    }
    if traj.len() != ctrl.len() || traj.iter().zip(&ctrl).any(|(a, b)| a[0] != b[0]) {
        return Err(AghfError::Config(format!("{TRAJECTORY_CSV} and {CONTROL_CSV} sample times differ")));
    }
    let t = traj.iter().map(|r| r[0]).collect();
    let x = traj.iter().map(|r| DVector::from_row_slice(&r[1..])).collect();
    let u = ctrl.iter().map(|r| DVector::from_row_slice(&r[1..])).collect();
    DenseSolution::new(t, x, u).map_err(|e| AghfError::Config(format!("solution: {e}")))
}

/// Re-evaluates a saved dense solution against the config's constraints.
pub fn evaluate_saved(cfg: &ProblemConfig, solution_dir: &Path) -> Result<Verdict, AghfError> {
    let problem = cfg.to_problem()?;
    let model = &problem.model;
    let dense = read_dense(solution_dir, model.dof(), model.num_inputs())?;
    let closed_loop = closed_loop_integrate(model, &dense, &cfg.evaluation)?;
    Ok(evaluate_success(
        model,
        &closed_loop,
        &problem.phase2.spec.constraints,
        &problem.xf,
        &cfg.evaluation,
    ))
}

pub fn cmd_evaluate(args: &EvaluateArgs, quiet: bool) -> i32 {
    let cfg = match load_config(&args.common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let verdict = match evaluate_saved(&cfg, &args.solution) {
        Ok(v) => v,
        Err(e @ AghfError::Divergence { .. }) => {
            eprintln!("error: {e}");
            return EXIT_CRITERIA;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let out_dir = args.common.output_dir.clone().unwrap_or_else(|| args.solution.clone());
    let written = fs::create_dir_all(&out_dir).and_then(|_| {
        write_json(
            &out_dir.join(VERDICT_JSON),
            &serde_json::to_value(&verdict).unwrap_or(Value::Null),
        )
    });
    if let Err(e) = written {
        eprintln!("error: writing verdict: {e}");
        return EXIT_CONFIG;
    }
    if !quiet {
        println!(
            "success={} terminal_error={:.3e} box_excess={:?} obstacle_clearance={:?}",
            verdict.success, verdict.terminal_error, verdict.box_excess, verdict.obstacle_clearance
        );
    }
    if verdict.success {
        EXIT_OK
    } else {
        EXIT_CRITERIA
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn sanitize(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '+') { c } else { '_' })
        .collect()
}

/// Runs one solve per value and repeat, continuing past failures, and
/// writes `sweep.csv` with per-value statistics. Exits 0 once the sweep has
/// run, whatever the individual outcomes.
pub fn cmd_sweep(args: &SweepArgs, quiet: bool) -> i32 {
    let values: Vec<&str> = args.values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        eprintln!("error: sweep needs at least one value (--values a,b,...)");
        return EXIT_CONFIG;
    }
    if args.repeat == 0 {
        eprintln!("error: --repeat must be at least 1");
        return EXIT_CONFIG;
    }
    let base = match ProblemConfig::load_table(&args.common.config, &args.common.overrides) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    // Every value must produce a valid config before anything is solved.
    let mut configs = Vec::with_capacity(values.len());
    for value in &values {
        let mut table = base.clone();
        let parsed = crate::config::apply_override(&mut table, &format!("{}={value}", args.param))
            .and_then(|_| ProblemConfig::from_table(table))
            .and_then(|cfg| cfg.validate().map(|_| cfg));
        match parsed {
            Ok(mut cfg) => {
                apply_cli_settings(&mut cfg, &args.common);
                configs.push(cfg);
            }
            Err(e) => {
                eprintln!("error: {}={value}: {e}", args.param);
                return EXIT_CONFIG;
            }
        }
    }
    let root = configs[0].output.directory.clone();
    if let Err(e) = fs::create_dir_all(&root) {
        eprintln!("error: cannot create output directory {}: {e}", root.display());
        return EXIT_CONFIG;
    }

    let header = [
        "value",
        "runs",
        "successes",
        "success_rate",
        "action_mean",
        "action_std",
        "defect_mean",
        "defect_std",
        "wall_time_mean",
        "wall_time_std",
        "failures",
    ];
    let mut csv = header.join(",");
    csv.push('\n');
    for (idx, (value, cfg)) in values.iter().zip(&configs).enumerate() {
        let mut outcomes = Vec::with_capacity(args.repeat);
        for rep in 0..args.repeat {
            let mut run_cfg = cfg.clone();
            run_cfg.output.directory = root.join(format!("{idx:03}_{}", sanitize(value))).join(format!("rep{rep}"));
            let outcome = solve_config(&run_cfg);
            if !quiet {
                println!("{}={value} rep {rep}: {}", args.param, outcome.message);
            }
            outcomes.push(outcome);
        }
        let successes = outcomes.iter().filter(|o| o.success).count();
        let actions: Vec<f64> = outcomes.iter().filter_map(|o| o.action).collect();
        let defects: Vec<f64> = outcomes.iter().filter_map(|o| o.defect).collect();
        let times: Vec<f64> = outcomes.iter().map(|o| o.wall_time).collect();
        let (am, asd) = mean_std(&actions);
        let (dm, dsd) = mean_std(&defects);
        let (tm, tsd) = mean_std(&times);
        let failures = outcomes.iter().filter(|o| o.exit_code != EXIT_OK).count();
        csv.push_str(&format!(
            "{value},{},{successes},{:.16e},{am:.16e},{asd:.16e},{dm:.16e},{dsd:.16e},{tm:.16e},{tsd:.16e},{failures}\n",
            outcomes.len(),
            successes as f64 / outcomes.len() as f64,
        ));
    }
    let written = fs::File::create(root.join(SWEEP_CSV)).and_then(|mut f| f.write_all(csv.as_bytes()));
    if let Err(e) = written {
        eprintln!("error: writing {SWEEP_CSV}: {e}");
        return EXIT_CONFIG;
    }
    EXIT_OK
}

pub fn init_logging(quiet: bool) {
    let default = if quiet { "error" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format_timestamp(None)
        .try_init();
}
