//! TOML run configuration: schema, defaults, validation and conversion into
//! core problem types.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sweep_core::approximation::ReferenceSolution;
use sweep_core::controls::{ControlSetA, ControlSetU};
use sweep_core::crowd::CorridorConfig;
use sweep_core::dynamics::{PerturbationMap, Sign};
use sweep_core::geometry::{ConstraintSet, GeometryConstants, SmoothConstraint};
use sweep_core::linalg::{Matrix, Vector};
use sweep_core::ocp::{ControlEnergy, EndpointSet, L1Terminal, ProgressTerminal, RunningCost, SweepingOCP, TerminalCost, ZeroRunning, ZeroTerminal};
use thiserror::Error;

/// Number of cells used when `run.k` is omitted.
pub const DEFAULT_K: usize = 200;

/// Configuration problems, each naming the offending field.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

/// Whole configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunBlock,
    pub crowd: Option<CrowdBlock>,
    pub problem: Option<ProblemBlock>,
}

/// Run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub tolerance: f64,
    #[serde(default)]
    pub sign: SignSpec,
    pub out: Option<PathBuf>,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_tol() -> f64 {
    1e-6
}

impl Default for RunBlock {
    fn default() -> Self {
        Self { k: DEFAULT_K, seed: 0, tolerance: default_tol(), sign: SignSpec::Plus, out: None }
    }
}

/// Orientation of the perturbation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignSpec {
    #[default]
    Plus,
    Minus,
}

impl From<SignSpec> for Sign {
    fn from(s: SignSpec) -> Self {
        match s {
            SignSpec::Plus => Sign::Plus,
            SignSpec::Minus => Sign::Minus,
        }
    }
}

/// Corridor data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrowdBlock {
    pub x_dest: f64,
    pub x1_init: f64,
    pub x2_init: f64,
    pub l1: f64,
    pub l2: f64,
    pub tau: f64,
    pub speeds: Option<[f64; 2]>,
}

impl Default for CrowdBlock {
    fn default() -> Self {
        let c = CorridorConfig::standard(1.0);
        Self { x_dest: c.x_dest, x1_init: c.x1_init, x2_init: c.x2_init, l1: c.l1, l2: c.l2, tau: c.tau, speeds: None }
    }
}

impl From<CrowdBlock> for CorridorConfig {
    fn from(b: CrowdBlock) -> Self {
        Self { x_dest: b.x_dest, x1_init: b.x1_init, x2_init: b.x2_init, l1: b.l1, l2: b.l2, tau: b.tau, speeds: b.speeds }
    }
}

/// A generic problem described through the expression catalogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub x0: Vec<f64>,
    pub constraints: Vec<ConstraintSpec>,
    pub constants: ConstantsSpec,
    pub dynamics: DynamicsSpec,
    #[serde(default)]
    pub controls: Option<ControlSpec>,
    #[serde(default)]
    pub terminal: TerminalSpec,
    #[serde(default)]
    pub running: RunningSpec,
    #[serde(default)]
    pub xi_x: EndpointSpec,
    #[serde(default = "half_line_zero")]
    pub xi_t: EndpointSpec,
    pub epsilon: f64,
    pub reference: ReferenceSpec,
    #[serde(default = "default_quadrature")]
    pub quadrature_points: usize,
}

fn half_line_zero() -> EndpointSpec {
    EndpointSpec::HalfLine { lower: 0.0 }
}

fn default_quadrature() -> usize {
    4
}

/// Constraint catalogue: `a·x + b`, `‖P·x − q‖ − r`, `xᵀQx + a·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintSpec {
    Affine { a: Vec<f64>, b: f64 },
    SphereGap { p: Vec<Vec<f64>>, q: Vec<f64>, r: f64 },
    Quadratic { q: Vec<Vec<f64>>, a: Vec<f64>, b: f64 },
}

/// Constants of the constraint functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSpec {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub beta: f64,
    pub rho: f64,
    pub c: f64,
}

/// Perturbation catalogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsSpec {
    /// `f(x, a) = (a_i s_i)_i`.
    ControlScaled { speeds: Vec<f64>, growth: f64 },
    /// `f(x, a) = A x + B a + c`.
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, c: Vec<f64>, growth: f64 },
}

/// Control-value set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    Unconstrained { dim: usize },
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

/// Terminal cost.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    #[default]
    Zero,
    L1 { target: Vec<f64>, tau: f64 },
    Progress { target: Vec<f64>, tau: f64 },
}

/// Running cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunningSpec {
    #[default]
    ControlEnergy,
    Zero,
}

/// Endpoint set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EndpointSpec {
    #[default]
    All,
    Point { at: Vec<f64> },
    Box { lower: Vec<f64>, upper: Vec<f64> },
    HalfLine { lower: f64 },
}

/// Reference path: piecewise-linear `x`, `u` through knots and constant `a` per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub mu: f64,
}

/// A configuration together with the bytes it was read from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Raw text, or the serialized defaults when no file was given.
    pub source: String,
}

/// Reads, parses and validates a configuration file.
pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    config.validate()?;
    Ok(LoadedConfig { config, source: text })
}

/// The default configuration, used by commands that may run without a file.
pub fn default_config() -> LoadedConfig {
    let config = RunConfig::default();
    let source = toml::to_string(&config).unwrap_or_default();
    LoadedConfig { config, source }
}

fn check_finite(field: &str, values: &[f64]) -> Result<(), ConfigError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid(field, "every number must be finite"))
    }
}

fn rows_finite(field: &str, rows: &[Vec<f64>]) -> Result<(), ConfigError> {
    rows.iter().try_for_each(|r| check_finite(field, r))
}

impl RunConfig {
    /// Schema checks beyond what the parser enforces.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run.k < 2 {
            return Err(invalid("run.k", format!("must be at least 2, got {}", self.run.k)));
        }
        if !(self.run.tolerance > 0.0 && self.run.tolerance.is_finite()) {
            return Err(invalid("run.tolerance", "must be positive and finite"));
        }
        if let Some(c) = &self.crowd {
            check_finite("crowd", &[c.x_dest, c.x1_init, c.x2_init, c.l1, c.l2, c.tau])?;
            if !(c.tau > 0.0) {
                return Err(invalid("crowd.tau", format!("tau must be positive, got {}", c.tau)));
            }
            CorridorConfig::from(*c).validate().map_err(|e| invalid("crowd", e.to_string()))?;
        }
        if let Some(p) = &self.problem {
            p.validate()?;
        }
        Ok(())
    }

    /// The corridor block, or the standard instance when absent.
    pub fn corridor(&self) -> CorridorConfig {
        self.crowd.unwrap_or_default().into()
    }
}

impl ProblemBlock {
    fn validate(&self) -> Result<(), ConfigError> {
        let n = self.x0.len();
        if n == 0 {
            return Err(invalid("problem.x0", "must not be empty"));
        }
        check_finite("problem.x0", &self.x0)?;
        let c = &self.constants;
        check_finite("problem.constants", &[c.m1, c.m2, c.m3, c.beta, c.rho, c.c])?;
        check_finite("problem.epsilon", &[self.epsilon])?;
        if !(self.epsilon > 0.0) {
            return Err(invalid("problem.epsilon", "must be positive"));
        }
        if self.constraints.is_empty() {
            return Err(invalid("problem.constraints", "need at least one constraint"));
        }
        for (i, g) in self.constraints.iter().enumerate() {
            let field = format!("problem.constraints[{i}]");
            match g {
                ConstraintSpec::Affine { a, b } => {
                    check_finite(&field, a)?;
                    check_finite(&field, &[*b])?;
                    if a.len() != n {
                        return Err(invalid(field, format!("a has length {}, expected {n}", a.len())));
                    }
                }
                ConstraintSpec::SphereGap { p, q, r } => {
                    rows_finite(&field, p)?;
                    check_finite(&field, q)?;
                    check_finite(&field, &[*r])?;
                    if p.len() != q.len() || p.iter().any(|row| row.len() != n) {
                        return Err(invalid(field, "p must be q.len() × n"));
                    }
                }
                ConstraintSpec::Quadratic { q, a, b } => {
                    rows_finite(&field, q)?;
                    check_finite(&field, a)?;
                    check_finite(&field, &[*b])?;
                    if q.len() != n || q.iter().any(|row| row.len() != n) || a.len() != n {
                        return Err(invalid(field, "q must be n × n and a of length n"));
                    }
                }
            }
        }
        match &self.dynamics {
            DynamicsSpec::ControlScaled { speeds, growth } => {
                check_finite("problem.dynamics", speeds)?;
                check_finite("problem.dynamics", &[*growth])?;
                if speeds.len() != n {
                    return Err(invalid("problem.dynamics.speeds", format!("expected length {n}")));
                }
            }
            DynamicsSpec::Linear { a, b, c, growth } => {
                rows_finite("problem.dynamics", a)?;
                rows_finite("problem.dynamics", b)?;
                check_finite("problem.dynamics", c)?;
                check_finite("problem.dynamics", &[*growth])?;
                let d = b.first().map_or(0, |r| r.len());
                if a.len() != n || a.iter().any(|r| r.len() != n) || b.len() != n || b.iter().any(|r| r.len() != d) || c.len() != n {
                    return Err(invalid("problem.dynamics", "matrix shapes disagree with the state dimension"));
                }
            }
        }
        let r = &self.reference;
        check_finite("problem.reference.times", &r.times)?;
        rows_finite("problem.reference.x", &r.x)?;
        rows_finite("problem.reference.u", &r.u)?;
        rows_finite("problem.reference.a", &r.a)?;
        check_finite("problem.reference.mu", &[r.mu])?;
        if self.quadrature_points == 0 {
            return Err(invalid("problem.quadrature_points", "must be positive"));
        }
        Ok(())
    }

    fn control_dim(&self) -> usize {
        match &self.dynamics {
            DynamicsSpec::ControlScaled { speeds, .. } => speeds.len(),
            DynamicsSpec::Linear { b, .. } => b.first().map_or(0, |r| r.len()),
        }
    }

    /// Builds the core problem on `k` cells.
    pub fn build(&self, k: usize, sign: Sign) -> Result<SweepingOCP, ConfigError> {
        let vec = |v: &[f64]| Vector::from_vec(v.to_vec());
        let mat = |rows: &[Vec<f64>], cols: usize| Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]);
        let n = self.x0.len();
        let constraints = self
            .constraints
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let c = match g {
                    ConstraintSpec::Affine { a, b } => SmoothConstraint::affine(vec(a), *b),
                    ConstraintSpec::SphereGap { p, q, r } => SmoothConstraint::sphere_gap(mat(p, n), vec(q), *r),
                    ConstraintSpec::Quadratic { q, a, b } => SmoothConstraint::quadratic(mat(q, n), vec(a), *b),
                };
                c.with_label(format!("g{i}"))
            })
            .collect();
        let c = self.constants;
        let constants = GeometryConstants { m1: c.m1, m2: c.m2, m3: c.m3, beta: c.beta, rho: c.rho, c: c.c };
        let geometry = ConstraintSet::new(constraints, constants).map_err(|e| invalid("problem.constraints", e.to_string()))?;
        let dynamics = match &self.dynamics {
            DynamicsSpec::ControlScaled { speeds, growth } => PerturbationMap::control_scaled(vec(speeds), *growth),
            DynamicsSpec::Linear { a, b, c, growth } => {
                let d = self.control_dim();
                PerturbationMap::linear(mat(a, n), mat(b, d), vec(c), *growth)
            }
        };
        let control_set = match &self.controls {
            None => ControlSetA::Unconstrained { dim: self.control_dim() },
            Some(ControlSpec::Unconstrained { dim }) => ControlSetA::Unconstrained { dim: *dim },
            Some(ControlSpec::Box { lower, upper }) => {
                ControlSetA::boxed(vec(lower), vec(upper)).map_err(|e| invalid("problem.controls", e.to_string()))?
            }
        };
        let terminal: Arc<dyn TerminalCost> = match &self.terminal {
            TerminalSpec::Zero => Arc::new(ZeroTerminal),
            TerminalSpec::L1 { target, tau } => Arc::new(L1Terminal { target: vec(target), tau: *tau, kink: 0.0 }),
            TerminalSpec::Progress { target, tau } => Arc::new(ProgressTerminal { target: vec(target), tau: *tau }),
        };
        let running: Arc<dyn RunningCost> = match self.running {
            RunningSpec::ControlEnergy => Arc::new(ControlEnergy),
            RunningSpec::Zero => Arc::new(ZeroRunning),
        };
        let endpoint = |e: &EndpointSpec| match e {
            EndpointSpec::All => EndpointSet::AllSpace,
            EndpointSpec::Point { at } => EndpointSet::Point(vec(at)),
            EndpointSpec::Box { lower, upper } => EndpointSet::Box { lower: vec(lower), upper: vec(upper) },
            EndpointSpec::HalfLine { lower } => EndpointSet::HalfLine { lower: *lower },
        };
        let r = &self.reference;
        let reference = ReferenceSolution::piecewise_linear(
            r.times.clone(),
            r.x.iter().map(|v| vec(v)).collect(),
            r.u.iter().map(|v| vec(v)).collect(),
            r.a.iter().map(|v| vec(v)).collect(),
            r.mu,
        )
        .map_err(|e| invalid("problem.reference", e.to_string()))?;
        let problem = SweepingOCP {
            geometry,
            dynamics,
            sign,
            shift_set: ControlSetU::unconstrained(),
            control_set,
            terminal,
            running,
            xi_x: endpoint(&self.xi_x),
            xi_t: endpoint(&self.xi_t),
            reference,
            x0: vec(&self.x0),
            epsilon: self.epsilon,
            k,
            quadrature_points: self.quadrature_points,
        };
        problem.validate().map_err(|e| invalid("problem", e.to_string()))?;
        Ok(problem)
    }
}
