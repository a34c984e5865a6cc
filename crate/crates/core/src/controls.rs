//! Control sets: the shift constraints `U = {u : ν_i(u) ≤ slack}` and the
//! control-value set `A` (box, finite list or unconstrained).

use thiserror::Error;

use crate::geometry::{project_family, GeometryError, InequalityFamily, ProjectionOptions, SmoothConstraint};
use crate::linalg::{Matrix, Vector};

/// Errors raised by control-set operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("Lipschitz constant must be positive, got {0}")]
    InvalidLipschitz(f64),
    #[error("slack must be nonnegative, got {0}")]
    InvalidSlack(f64),
    #[error("box bounds are inconsistent at coordinate {0}")]
    InvalidBox(usize),
    #[error("finite control set must be nonempty")]
    EmptyFinite,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// The shift constraints `ν_i(u) ≤ slack`, `i = 1..s`.
#[derive(Debug, Clone)]
pub struct ControlSetU {
    functions: Vec<SmoothConstraint>,
    lipschitz: f64,
    slack: f64,
}

impl ControlSetU {
    /// Builds `U` with zero slack.
    pub fn new(functions: Vec<SmoothConstraint>, lipschitz: f64) -> Result<Self, ControlError> {
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(ControlError::InvalidLipschitz(lipschitz));
        }
        Ok(Self { functions, lipschitz, slack: 0.0 })
    }

    /// The unconstrained case `s = 0`.
    pub fn unconstrained() -> Self {
        Self { functions: Vec::new(), lipschitz: 1.0, slack: 0.0 }
    }

    /// The relaxed set `U_k = {ν_i ≤ slack}`.
    pub fn with_slack(&self, slack: f64) -> Result<Self, ControlError> {
        if !(slack >= 0.0) {
            return Err(ControlError::InvalidSlack(slack));
        }
        Ok(Self { functions: self.functions.clone(), lipschitz: self.lipschitz, slack })
    }

    /// The functions `ν_i`.
    pub fn functions(&self) -> &[SmoothConstraint] {
        &self.functions
    }

    /// Number of functions `s`.
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    /// True when there are no shift constraints.
    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Lipschitz constant `L_ν`.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Current slack.
    pub fn slack(&self) -> f64 {
        self.slack
    }

    /// Values `ν_i(u)`.
    pub fn values(&self, u: &Vector) -> Vec<f64> {
        self.functions.iter().map(|f| f.value(u)).collect()
    }

    /// Largest excess `max_i max(0, ν_i(u) − slack)`.
    pub fn violation(&self, u: &Vector) -> f64 {
        self.values(u).into_iter().map(|v| (v - self.slack).max(0.0)).fold(0.0, f64::max)
    }

    /// Membership test with tolerance.
    pub fn contains(&self, u: &Vector, tol: f64) -> bool {
        self.violation(u) <= tol
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, u: &Vector) -> Result<Vector, ControlError> {
        if self.contains(u, 0.0) {
            return Ok(u.clone());
        }
        let opts = ProjectionOptions { enforce_tube: false, ..ProjectionOptions::default() };
        let (w, _) = project_family(self, u, opts)?;
        Ok(w)
    }
}

impl InequalityFamily for ControlSetU {
    fn count(&self) -> usize {
        self.functions.len()
    }
    fn value(&self, i: usize, w: &Vector) -> f64 {
        self.slack - self.functions[i].value(w)
    }
    fn gradient(&self, i: usize, w: &Vector) -> Vector {
        -self.functions[i].gradient(w)
    }
    fn hessian(&self, i: usize, w: &Vector) -> Matrix {
        -self.functions[i].hessian(w)
    }
}

/// Sign pattern of a normal-cone generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorSign {
    /// Coefficient unrestricted.
    Free,
    /// Coefficient nonnegative.
    Nonnegative,
}

/// The control-value set `A ⊂ R^d`.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSetA {
    /// `A = R^d`.
    Unconstrained { dim: usize },
    /// `A = [lower, upper]` componentwise.
    Box { lower: Vector, upper: Vector },
    /// A finite list of admissible values.
    Finite(Vec<Vector>),
}

impl ControlSetA {
    /// Validated box.
    pub fn boxed(lower: Vector, upper: Vector) -> Result<Self, ControlError> {
        for i in 0..lower.len() {
            if !(lower[i] <= upper[i]) || lower.len() != upper.len() {
                return Err(ControlError::InvalidBox(i));
            }
        }
        Ok(Self::Box { lower, upper })
    }

    /// Validated finite set.
    pub fn finite(points: Vec<Vector>) -> Result<Self, ControlError> {
        if points.is_empty() {
            return Err(ControlError::EmptyFinite);
        }
        Ok(Self::Finite(points))
    }

    /// Dimension `d`.
    pub fn dim(&self) -> usize {
        match self {
            Self::Unconstrained { dim } => *dim,
            Self::Box { lower, .. } => lower.len(),
            Self::Finite(points) => points[0].len(),
        }
    }

    /// Euclidean projection onto `A` (nearest listed point for finite sets, first on ties).
    pub fn project(&self, a: &Vector) -> Vector {
        match self {
            Self::Unconstrained { .. } => a.clone(),
            Self::Box { lower, upper } => Vector::from_iterator(a.len(), (0..a.len()).map(|i| a[i].clamp(lower[i], upper[i]))),
            Self::Finite(points) => points
                .iter()
                .min_by(|p, q| (*p - a).norm().partial_cmp(&(*q - a).norm()).unwrap_or(std::cmp::Ordering::Equal))
                .cloned()
                .unwrap_or_else(|| a.clone()),
        }
    }

    /// Euclidean distance to `A`.
    pub fn distance(&self, a: &Vector) -> f64 {
        (self.project(a) - a).norm()
    }

    /// Membership test with tolerance.
    pub fn contains(&self, a: &Vector, tol: f64) -> bool {
        self.distance(a) <= tol
    }

    /// Distance from `psi` to the normal cone `N_A(a)` (for `a ∈ A`).
    pub fn normal_cone_distance(&self, a: &Vector, psi: &Vector) -> f64 {
        match self {
            Self::Unconstrained { .. } => psi.norm(),
            Self::Box { lower, upper } => {
                let mut acc = 0.0;
                for i in 0..a.len() {
                    let at_lo = (a[i] - lower[i]).abs() <= 1e-12 * (1.0 + lower[i].abs());
                    let at_hi = (a[i] - upper[i]).abs() <= 1e-12 * (1.0 + upper[i].abs());
                    let d = match (at_lo, at_hi) {
                        (true, true) => 0.0,
                        (true, false) => psi[i].max(0.0),
                        (false, true) => (-psi[i]).max(0.0),
                        (false, false) => psi[i].abs(),
                    };
                    acc += d * d;
                }
                acc.sqrt()
            }
            Self::Finite(points) => {
                if points.iter().any(|p| (p - a).norm() <= 1e-12 * (1.0 + a.norm())) {
                    0.0
                } else {
                    psi.norm()
                }
            }
        }
    }

    /// Generators of `N_A(a)` as `(direction, sign)` pairs.
    pub fn normal_cone_generators(&self, a: &Vector) -> Vec<(Vector, GeneratorSign)> {
        let d = a.len();
        let unit = |i: usize, s: f64| {
            let mut e = Vector::zeros(d);
            e[i] = s;
            e
        };
        match self {
            Self::Unconstrained { .. } => Vec::new(),
            Self::Box { lower, upper } => {
                let mut out = Vec::new();
                for i in 0..d {
                    let at_lo = (a[i] - lower[i]).abs() <= 1e-12 * (1.0 + lower[i].abs());
                    let at_hi = (a[i] - upper[i]).abs() <= 1e-12 * (1.0 + upper[i].abs());
                    match (at_lo, at_hi) {
                        (true, true) => out.push((unit(i, 1.0), GeneratorSign::Free)),
                        (true, false) => out.push((unit(i, -1.0), GeneratorSign::Nonnegative)),
                        (false, true) => out.push((unit(i, 1.0), GeneratorSign::Nonnegative)),
                        (false, false) => {}
                    }
                }
                out
            }
            Self::Finite(_) => (0..d).map(|i| (unit(i, 1.0), GeneratorSign::Free)).collect(),
        }
    }
}
