//! TOML problem description and its translation into a [`Problem`].
//!
//! A minimal file needs only `[system]` and `[task]`; every other section
//! falls back to defaults that run the sphere-obstacle style scenarios.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{RobotModel, DEFAULT_GRAVITY};
use crate::error::{AghfError, Result};
use crate::evaluation::EvaluationConfig;
use crate::flow::{PhaseSetup, Problem, SolverConfig, DEFAULT_FEASIBILITY_TOL};
use crate::lagrangian::{
    BoxBounds, ConstraintKind, ConstraintSpec, CostSpec, LagrangianMode, LagrangianSpec, PenaltyGains, QuadraticStateCost,
};

pub const DEFAULT_KD: f64 = 1e4;
pub const DEFAULT_DEGREE: usize = 7;
pub const DEFAULT_SHARPNESS: f64 = 100.0;
pub const DEFAULT_BOX_WEIGHT: f64 = 1e6;
pub const DEFAULT_OBSTACLE_WEIGHT: f64 = 1e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Seed for the sampled error-bound constants.
    #[serde(default)]
    pub seed: u64,
    pub system: SystemConfig,
    pub task: TaskConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub constraints: Vec<ConstraintConfig>,
    #[serde(default)]
    pub phase1: Phase1Config,
    #[serde(default)]
    pub phase2: Phase2Config,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    DoubleIntegrator {
        dof: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        masses: Option<Vec<f64>>,
        /// `N x m` input matrix given row by row; identity when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        actuation: Option<Vec<Vec<f64>>>,
    },
    PlanarChain {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dof: Option<usize>,
        masses: Vec<f64>,
        lengths: Vec<f64>,
        #[serde(default = "default_gravity")]
        gravity: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        actuation: Option<Vec<Vec<f64>>>,
    },
}

fn default_gravity() -> f64 {
    DEFAULT_GRAVITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub x0: Vec<f64>,
    pub xf: Vec<f64>,
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostConfig {
    #[default]
    SquaredControl,
    WeightedSquaredControl { weights: Vec<f64> },
    QuadraticState { weights: Vec<f64>, reference: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintType {
    StateBox,
    VelocityBox,
    InputBox,
    CircleObstacle,
}

/// One constraint. Boxes take `limit` (symmetric) or `lower`/`upper`;
/// obstacles take `center`, `radius` and optionally `frames` (all by default).
/// `k`/`c` are the Phase-2 gains, `phase1_k`/`phase1_c` default to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub kind: ConstraintType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<usize>>,
    #[serde(default)]
    pub clearance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase1_k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase1_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Config {
    pub kd: f64,
    pub degree: usize,
    pub feasibility_tol: f64,
    pub solver: SolverConfig,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            kd: DEFAULT_KD,
            degree: DEFAULT_DEGREE,
            feasibility_tol: DEFAULT_FEASIBILITY_TOL,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Config {
    pub kd: f64,
    pub degree: usize,
    /// Use the `G`-metric Lagrangian instead of the generalized one.
    /// Only meaningful for the squared-control cost.
    pub legacy: bool,
    pub solver: SolverConfig,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Self {
            kd: DEFAULT_KD,
            degree: DEFAULT_DEGREE,
            legacy: false,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("aghf_output"),
            formats: vec![OutputFormat::Csv, OutputFormat::Json],
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, format: OutputFormat) -> bool {
        self.formats.contains(&format)
    }
}

fn config_err(msg: impl Into<String>) -> AghfError {
    AghfError::Config(msg.into())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))
}

/// Applies `key.path=value`. Numeric segments index arrays and missing
/// tables are created. The value is parsed as a TOML literal and falls back
/// to a bare string, so `--set output.directory=out` needs no quotes.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not of the form key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(config_err(format!("override `{assignment}` has an empty key segment")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let segments: Vec<&str> = key.split('.').collect();
    let mut root = toml::Value::Table(std::mem::take(table));
    let result = set_path(&mut root, &segments, value, key);
    if let toml::Value::Table(t) = root {
        *table = t;
    }
    result
}

fn set_path(node: &mut toml::Value, segments: &[&str], value: toml::Value, key: &str) -> Result<()> {
    let Some((head, rest)) = segments.split_first() else {
        *node = value;
        return Ok(());
    };
    match node {
        toml::Value::Table(t) => {
            let child = t
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            set_path(child, rest, value, key)
        }
        toml::Value::Array(items) => {
            let len = items.len();
            let child = head
                .parse::<usize>()
                .ok()
                .and_then(|i| items.get_mut(i))
                .ok_or_else(|| config_err(format!("override `{key}`: `{head}` is not an index below {len}")))?;
            set_path(child, rest, value, key)
        }
        _ => Err(config_err(format!("override `{key}`: cannot descend into a scalar at `{head}`"))),
    }
}

impl ProblemConfig {
    /// Loads a file, applies overrides in order and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = read_text(path)?;
        let cfg = if overrides.is_empty() {
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?
        } else {
            let mut table: toml::Table = text
                .parse()
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            Self::from_table(table)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads the raw table with overrides applied, for callers that vary it further.
    pub fn load_table(path: &Path, overrides: &[String]) -> Result<toml::Table> {
        let mut table: toml::Table = read_text(path)?
            .parse()
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Ok(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        // Round-trip through text so errors carry a located snippet.
        let text = toml::to_string(&table).map_err(|e| config_err(e.to_string()))?;
        toml::from_str(&text).map_err(|e| config_err(e.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dof(&self) -> usize {
        match &self.system {
            SystemConfig::DoubleIntegrator { dof, .. } => *dof,
            SystemConfig::PlanarChain { masses, .. } => masses.len(),
        }
    }

    fn num_inputs(&self) -> usize {
        let actuation = match &self.system {
            SystemConfig::DoubleIntegrator { actuation, .. } | SystemConfig::PlanarChain { actuation, .. } => actuation,
        };
        actuation
            .as_ref()
            .and_then(|rows| rows.first().map(Vec::len))
            .unwrap_or_else(|| self.dof())
    }

    /// Checks every field before any model is built. Messages name the field.
    pub fn validate(&self) -> Result<()> {
        self.validate_system()?;
        let n = self.dof();
        let m = self.num_inputs();
        let d = 2 * n;

        let task = &self.task;
        for (name, v) in [("task.x0", &task.x0), ("task.xf", &task.xf)] {
            if v.len() != d {
                return Err(config_err(format!("{name} must have 2N = {d} entries, got {}", v.len())));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(config_err(format!("{name}[{i}] is not finite")));
            }
        }
        if !(task.horizon > 0.0) || !task.horizon.is_finite() {
            return Err(config_err(format!("task.horizon must be positive and finite, got {}", task.horizon)));
        }

        match &self.cost {
            CostConfig::SquaredControl => {}
            CostConfig::WeightedSquaredControl { weights } => {
                if weights.len() != m {
                    return Err(config_err(format!("cost.weights must have {m} entries (one per input), got {}", weights.len())));
                }
                if let Some(i) = weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
                    return Err(config_err(format!("cost.weights[{i}] must be positive")));
                }
            }
            CostConfig::QuadraticState { weights, reference } => {
                if weights.len() != d {
                    return Err(config_err(format!("cost.weights must have 2N = {d} entries, got {}", weights.len())));
                }
                if reference.len() != d {
                    return Err(config_err(format!("cost.reference must have 2N = {d} entries, got {}", reference.len())));
                }
                if let Some(i) = weights.iter().position(|w| !(*w >= 0.0) || !w.is_finite()) {
                    return Err(config_err(format!("cost.weights[{i}] must be nonnegative")));
                }
                if let Some(i) = reference.iter().position(|r| !r.is_finite()) {
                    return Err(config_err(format!("cost.reference[{i}] is not finite")));
                }
            }
        }

        for (i, c) in self.constraints.iter().enumerate() {
            c.validate(i, n, m)?;
        }

        for (name, kd, degree, solver) in [
            ("phase1", self.phase1.kd, self.phase1.degree, &self.phase1.solver),
            ("phase2", self.phase2.kd, self.phase2.degree, &self.phase2.solver),
        ] {
            if !(kd > 0.0) || !kd.is_finite() {
                return Err(config_err(format!("{name}.kd must be positive and finite, got {kd}")));
            }
            if degree < 2 {
                return Err(config_err(format!("{name}.degree must be at least 2, got {degree}")));
            }
            solver
                .validate()
                .map_err(|e| config_err(format!("{name}.solver: {}", strip_prefix(&e))))?;
        }
        if !(self.phase1.feasibility_tol >= 0.0) || !self.phase1.feasibility_tol.is_finite() {
            return Err(config_err(format!(
                "phase1.feasibility_tol must be nonnegative, got {}",
                self.phase1.feasibility_tol
            )));
        }
        if self.phase2.legacy && self.cost != CostConfig::SquaredControl {
            return Err(config_err("phase2.legacy requires cost.kind = \"squared_control\""));
        }
        self.evaluation
            .validate()
            .map_err(|e| config_err(format!("evaluation: {}", strip_prefix(&e))))?;
        if self.output.formats.is_empty() {
            return Err(config_err("output.formats must list at least one of \"csv\", \"json\""));
        }
        Ok(())
    }

    fn validate_system(&self) -> Result<()> {
        let positive = |name: &str, v: &[f64]| -> Result<()> {
            match v.iter().position(|x| !(*x > 0.0) || !x.is_finite()) {
                Some(i) => Err(config_err(format!("system.{name}[{i}] must be positive, got {}", v[i]))),
                None => Ok(()),
            }
        };
        let (n, actuation) = match &self.system {
            SystemConfig::DoubleIntegrator { dof, masses, actuation } => {
                if *dof == 0 {
                    return Err(config_err("system.dof must be at least 1"));
                }
                if let Some(m) = masses {
                    if m.len() != *dof {
                        return Err(config_err(format!("system.masses has {} entries but system.dof is {dof}", m.len())));
                    }
                    positive("masses", m)?;
                }
                (*dof, actuation)
            }
            SystemConfig::PlanarChain { dof, masses, lengths, gravity, actuation } => {
                if masses.is_empty() {
                    return Err(config_err("system.masses must not be empty"));
                }
                if lengths.len() != masses.len() {
                    return Err(config_err(format!(
                        "system.lengths has {} entries but system.masses has {}",
                        lengths.len(),
                        masses.len()
                    )));
                }
                if let Some(n) = dof {
                    if *n != masses.len() {
                        return Err(config_err(format!("system.masses has {} entries but system.dof is {n}", masses.len())));
                    }
                }
                positive("masses", masses)?;
                positive("lengths", lengths)?;
                if !gravity.is_finite() {
                    return Err(config_err("system.gravity is not finite"));
                }
                (masses.len(), actuation)
            }
        };
        if let Some(rows) = actuation {
            if rows.len() != n {
                return Err(config_err(format!("system.actuation must have N = {n} rows, got {}", rows.len())));
            }
            let m = rows[0].len();
            if m == 0 || m > n {
                return Err(config_err(format!("system.actuation must have between 1 and {n} columns, got {m}")));
            }
            if let Some(i) = rows.iter().position(|r| r.len() != m) {
                return Err(config_err(format!("system.actuation[{i}] has {} columns, expected {m}", rows[i].len())));
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<RobotModel> {
        let (model, actuation) = match &self.system {
            SystemConfig::DoubleIntegrator { dof, masses, actuation } => (
                match masses {
                    Some(m) => RobotModel::double_integrator_with_masses(m.clone()),
                    None => RobotModel::double_integrator(*dof),
                },
                actuation,
            ),
            SystemConfig::PlanarChain { masses, lengths, gravity, actuation, .. } => {
                (RobotModel::planar_chain(masses.clone(), lengths.clone(), *gravity), actuation)
            }
        };
        let model = model.map_err(|e| config_err(format!("system: {}", strip_prefix(&e))))?;
        match actuation {
            Some(rows) => {
                let b = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
                model
                    .with_actuation(b)
                    .map_err(|e| config_err(format!("system.actuation: {}", strip_prefix(&e))))
            }
            None => Ok(model),
        }
    }

    fn cost_spec(&self) -> CostSpec {
        match &self.cost {
            CostConfig::SquaredControl => CostSpec::SquaredControl,
            CostConfig::WeightedSquaredControl { weights } => CostSpec::WeightedSquaredControl(weights.clone()),
            CostConfig::QuadraticState { weights, reference } => CostSpec::Custom(Arc::new(QuadraticStateCost {
                weights: weights.clone(),
                reference: reference.clone(),
            })),
        }
    }

    /// Validated config to solver problem.
    pub fn to_problem(&self) -> Result<Problem> {
        self.validate()?;
        let model = self.build_model()?;
        let (n, m) = (model.dof(), model.num_inputs());
        let phase1_constraints = self.constraints.iter().map(|c| c.to_spec(n, m, true)).collect::<Vec<_>>();
        let phase2_constraints = self.constraints.iter().map(|c| c.to_spec(n, m, false)).collect::<Vec<_>>();
        let phase2_mode = if self.phase2.legacy { LagrangianMode::Legacy } else { LagrangianMode::Phase2 };
        let problem = Problem {
            x0: DVector::from_vec(self.task.x0.clone()),
            xf: DVector::from_vec(self.task.xf.clone()),
            horizon: self.task.horizon,
            phase1: PhaseSetup {
                spec: LagrangianSpec::new(self.cost_spec(), self.phase1.kd, phase1_constraints, LagrangianMode::Phase1),
                degree: self.phase1.degree,
                solver: self.phase1.solver.clone(),
            },
            phase2: PhaseSetup {
                spec: LagrangianSpec::new(self.cost_spec(), self.phase2.kd, phase2_constraints, phase2_mode),
                degree: self.phase2.degree,
                solver: self.phase2.solver.clone(),
            },
            feasibility_tol: self.phase1.feasibility_tol,
            initial_guess: None,
            model,
        };
        problem.validate().map_err(|e| config_err(strip_prefix(&e)))?;
        Ok(problem)
    }
}

fn strip_prefix(e: &AghfError) -> String {
    match e {
        AghfError::Domain(m) | AghfError::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

impl ConstraintConfig {
    fn validate(&self, index: usize, n: usize, m: usize) -> Result<()> {
        let field = |name: &str| format!("constraints[{index}].{name}");
        let mut unexpected = Vec::new();
        let is_box = self.kind != ConstraintType::CircleObstacle;
        if is_box {
            let len = if self.kind == ConstraintType::InputBox { m } else { n };
            for (name, present) in [
                ("center", self.center.is_some()),
                ("radius", self.radius.is_some()),
                ("frames", self.frames.is_some()),
            ] {
                if present {
                    unexpected.push(name);
                }
            }
            let (lower, upper) = match (self.limit, &self.lower, &self.upper) {
                (Some(l), None, None) => {
                    if !(l > 0.0) || !l.is_finite() {
                        return Err(config_err(format!("{} must be positive, got {l}", field("limit"))));
                    }
                    (vec![-l; len], vec![l; len])
                }
                (None, Some(lo), Some(hi)) => (lo.clone(), hi.clone()),
                (Some(_), _, _) => {
                    return Err(config_err(format!(
                        "{}: give either `limit` or `lower`/`upper`, not both",
                        field("limit")
                    )))
                }
                _ => {
                    return Err(config_err(format!(
                        "constraints[{index}]: box constraints need `limit` or both `lower` and `upper`"
                    )))
                }
            };
            for (name, v) in [("lower", &lower), ("upper", &upper)] {
                if v.len() != len {
                    return Err(config_err(format!("{} must have {len} entries, got {}", field(name), v.len())));
                }
            }
            if let Some(i) = (0..len).find(|&i| !(lower[i] < upper[i])) {
                return Err(config_err(format!(
                    "{}[{i}] = {} is not below {}[{i}] = {}",
                    field("lower"),
                    lower[i],
                    field("upper"),
                    upper[i]
                )));
            }
            if !(self.clearance >= 0.0) {
                return Err(config_err(format!("{} must be nonnegative", field("clearance"))));
            }
            if let Some(i) = (0..len).find(|&i| 2.0 * self.clearance >= upper[i] - lower[i]) {
                return Err(config_err(format!(
                    "{} = {} leaves no room inside bound {i}",
                    field("clearance"),
                    self.clearance
                )));
            }
        } else {
            for (name, present) in [
                ("limit", self.limit.is_some()),
                ("lower", self.lower.is_some()),
                ("upper", self.upper.is_some()),
            ] {
                if present {
                    unexpected.push(name);
                }
            }
            let center = self.center.ok_or_else(|| config_err(format!("{} is required for circle_obstacle", field("center"))))?;
            if center.iter().any(|c| !c.is_finite()) {
                return Err(config_err(format!("{} is not finite", field("center"))));
            }
            let radius = self.radius.ok_or_else(|| config_err(format!("{} is required for circle_obstacle", field("radius"))))?;
            if !(radius > 0.0) || !radius.is_finite() {
                return Err(config_err(format!("{} must be positive, got {radius}", field("radius"))));
            }
            if !(self.clearance >= 0.0) {
                return Err(config_err(format!("{} must be nonnegative", field("clearance"))));
            }
            if let Some(frames) = &self.frames {
                if frames.is_empty() {
                    return Err(config_err(format!("{} must not be empty", field("frames"))));
                }
                if let Some(f) = frames.iter().find(|&&f| f >= n) {
                    return Err(config_err(format!("{} contains {f}, but the model has {n} frames", field("frames"))));
                }
            }
        }
        if let Some(name) = unexpected.first() {
            return Err(config_err(format!("{} does not apply to {:?} constraints", field(name), self.kind)));
        }
        for (name, v) in [("k", self.k), ("c", self.c), ("phase1_k", self.phase1_k), ("phase1_c", self.phase1_c)] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(config_err(format!("{} must be positive, got {v}", field(name))));
                }
            }
        }
        Ok(())
    }

    fn gains(&self, phase1: bool) -> PenaltyGains {
        let default_k = match self.kind {
            ConstraintType::CircleObstacle => DEFAULT_OBSTACLE_WEIGHT,
            _ => DEFAULT_BOX_WEIGHT,
        };
        let k = self.k.unwrap_or(default_k);
        let c = self.c.unwrap_or(DEFAULT_SHARPNESS);
        if phase1 {
            PenaltyGains::new(self.phase1_k.unwrap_or(k), self.phase1_c.unwrap_or(c))
        } else {
            PenaltyGains::new(k, c)
        }
    }

    fn bounds(&self, len: usize) -> BoxBounds {
        let b = match self.limit {
            Some(l) => BoxBounds::symmetric(l, len),
            None => BoxBounds::new(
                self.lower.clone().unwrap_or_default(),
                self.upper.clone().unwrap_or_default(),
            ),
        };
        b.with_clearance(self.clearance)
    }

    fn to_spec(&self, n: usize, m: usize, phase1: bool) -> ConstraintSpec {
        let kind = match self.kind {
            ConstraintType::StateBox => ConstraintKind::StateBox(self.bounds(n)),
            ConstraintType::VelocityBox => ConstraintKind::VelocityBox(self.bounds(n)),
            ConstraintType::InputBox => ConstraintKind::InputBox(self.bounds(m)),
            ConstraintType::CircleObstacle => ConstraintKind::CircleObstacle {
                center: self.center.unwrap_or_default(),
                radius: self.radius.unwrap_or(0.0),
                clearance: self.clearance,
                frames: self.frames.clone().unwrap_or_else(|| (0..n).collect()),
            },
        };
        ConstraintSpec::new(kind, self.gains(phase1))
    }
}

/// Short human-readable description of a config, used in logs.
pub fn describe(cfg: &ProblemConfig) -> String {
    let mut s = String::new();
    let kind = match cfg.system {
        SystemConfig::DoubleIntegrator { .. } => "double_integrator",
        SystemConfig::PlanarChain { .. } => "planar_chain",
    };
    let _ = write!(
        s,
        "{kind} N={} T={} constraints={} p1=(kd {:e}, p {}) p2=(kd {:e}, p {})",
        cfg.dof(),
        cfg.task.horizon,
        cfg.constraints.len(),
        cfg.phase1.kd,
        cfg.phase1.degree,
        cfg.phase2.kd,
        cfg.phase2.degree
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const PENDULUM: &str = r#"
        [system]
        kind = "planar_chain"
        masses = [1.0]
        lengths = [1.0]

        [task]
        x0 = [0.0, 0.0]
        xf = [3.14, 0.0]
        horizon = 3.0

        [[constraints]]
        kind = "input_box"
        limit = 8.0

        [[constraints]]
        kind = "circle_obstacle"
        center = [1.0, 0.0]
        radius = 0.2
        phase1_k = 1e3
    "#;

    fn err_of(text: &str) -> String {
        match ProblemConfig::parse(text) {
            Err(AghfError::Config(m)) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    fn with_system(system: &str) -> String {
        format!("[system]\n{system}\n[task]\nx0 = [0.0, 0.0, 0.0, 0.0]\nxf = [1.0, 0.0, 0.0, 0.0]\nhorizon = 1.0\n")
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ProblemConfig::parse(PENDULUM).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.phase1.kd, 1e4);
        assert_eq!(cfg.phase2.degree, 7);
        assert_eq!(cfg.phase2.solver.s_max, 10.0);
        assert_eq!(cfg.evaluation.kp, 100.0);
        assert_eq!(cfg.cost, CostConfig::SquaredControl);
        let problem = cfg.to_problem().unwrap();
        assert_eq!(problem.model.dof(), 1);
        let input = &problem.phase2.spec.constraints[0];
        assert_eq!(input.gains, PenaltyGains::new(DEFAULT_BOX_WEIGHT, DEFAULT_SHARPNESS));
        let obstacle1 = &problem.phase1.spec.constraints[1];
        let obstacle2 = &problem.phase2.spec.constraints[1];
        assert_eq!(obstacle1.gains.weight, 1e3);
        assert_eq!(obstacle2.gains.weight, DEFAULT_OBSTACLE_WEIGHT);
        assert!(matches!(&obstacle2.kind, ConstraintKind::CircleObstacle { frames, .. } if frames == &vec![0]));
        assert_eq!(problem.phase1.spec.mode, LagrangianMode::Phase1);
    }

    #[test]
    fn serialization_round_trips() {
        let cfg = ProblemConfig::parse(PENDULUM).unwrap();
        assert_eq!(ProblemConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn mismatched_lengths_name_the_field() {
        let m = err_of(&with_system("kind = \"planar_chain\"\nmasses = [1.0, 1.0]\nlengths = [1.0, 1.0, 1.0]"));
        assert!(m.contains("system.lengths"), "{m}");
        let m = err_of(&with_system("kind = \"planar_chain\"\nmasses = [1.0]\nlengths = [1.0]"));
        assert!(m.contains("task.x0"), "{m}");
        let m = err_of(&with_system("kind = \"planar_chain\"\nmasses = [1.0, -1.0]\nlengths = [1.0, 1.0]"));
        assert!(m.contains("system.masses[1]"), "{m}");
    }

    #[test]
    fn unknown_fields_are_rejected_with_location() {
        let m = err_of(&format!("{PENDULUM}\n[phase2]\nkdd = 3.0\n"));
        assert!(m.contains("kdd"), "{m}");
        let m = err_of(&PENDULUM.replace("kind = \"planar_chain\"", "kind = \"quadrotor\""));
        assert!(m.contains("quadrotor"), "{m}");
    }

    #[test]
    fn out_of_domain_fields_are_rejected() {
        for (patch, field) in [
            ("[phase2]\nkd = -1.0\n", "phase2.kd"),
            ("[phase1]\ndegree = 1\n", "phase1.degree"),
            ("[phase1.solver]\ns_max = 0.0\n", "phase1.solver"),
            ("[evaluation]\nepsilon = 0.0\n", "evaluation"),
            ("[output]\nformats = []\n", "output.formats"),
        ] {
            let m = err_of(&format!("{PENDULUM}\n{patch}"));
            assert!(m.contains(field), "{field}: {m}");
        }
        let m = err_of(&PENDULUM.replace("horizon = 3.0", "horizon = 0.0"));
        assert!(m.contains("task.horizon"), "{m}");
    }

    #[test]
    fn constraint_errors_are_indexed() {
        let m = err_of(&PENDULUM.replace("radius = 0.2", "radius = -0.2"));
        assert!(m.contains("constraints[1].radius"), "{m}");
        let m = err_of(&PENDULUM.replace("limit = 8.0", "lower = [1.0]\nupper = [-1.0]"));
        assert!(m.contains("constraints[0].lower[0]"), "{m}");
        let m = err_of(&PENDULUM.replace("limit = 8.0", "limit = 8.0\nradius = 1.0"));
        assert!(m.contains("constraints[0].radius"), "{m}");
        let m = err_of(&PENDULUM.replace("center = [1.0, 0.0]", "center = [1.0, 0.0]\nframes = [3]"));
        assert!(m.contains("constraints[1].frames"), "{m}");
        let m = err_of(&PENDULUM.replace("limit = 8.0", "limit = 8.0\nclearance = 8.0"));
        assert!(m.contains("constraints[0].clearance"), "{m}");
    }

    #[test]
    fn overrides_reach_nested_tables_and_arrays() {
        let mut table: toml::Table = PENDULUM.parse().unwrap();
        apply_override(&mut table, "phase2.kd=1e6").unwrap();
        apply_override(&mut table, "phase2.solver.s_max = 2").unwrap();
        apply_override(&mut table, "constraints.0.limit=5.5").unwrap();
        apply_override(&mut table, "task.xf=[1.0, 0.5]").unwrap();
        apply_override(&mut table, "output.directory=some/dir").unwrap();
        let cfg = ProblemConfig::from_table(table).unwrap();
        assert_eq!(cfg.phase2.kd, 1e6);
        assert_eq!(cfg.phase2.solver.s_max, 2.0);
        assert_eq!(cfg.constraints[0].limit, Some(5.5));
        assert_eq!(cfg.task.xf, vec![1.0, 0.5]);
        assert_eq!(cfg.output.directory, PathBuf::from("some/dir"));
        // Untouched defaults survive.
        assert_eq!(cfg.phase2.degree, DEFAULT_DEGREE);
    }

    #[test]
    fn malformed_overrides_are_errors() {
        let mut table: toml::Table = PENDULUM.parse().unwrap();
        assert!(apply_override(&mut table, "phase2.kd").is_err());
        assert!(apply_override(&mut table, "=3").is_err());
        assert!(apply_override(&mut table, "constraints.7.limit=1").is_err());
        assert!(apply_override(&mut table, "task.horizon.x=1").is_err());
    }

    #[test]
    fn actuation_matrix_is_checked() {
        let base = "kind = \"double_integrator\"\ndof = 2\n";
        assert!(ProblemConfig::parse(&with_system(&format!("{base}actuation = [[1.0], [0.5]]"))).is_ok());
        let m = err_of(&with_system(&format!("{base}actuation = [[1.0], [0.5, 1.0]]")));
        assert!(m.contains("system.actuation[1]"), "{m}");
        let m = err_of(&with_system(&format!("{base}actuation = [[1.0]]")));
        assert!(m.contains("system.actuation"), "{m}");
    }

    #[test]
    fn legacy_requires_squared_control() {
        let text = format!("{PENDULUM}\n[cost]\nkind = \"weighted_squared_control\"\nweights = [2.0]\n[phase2]\nlegacy = true\n");
        assert!(err_of(&text).contains("phase2.legacy"));
    }
}
