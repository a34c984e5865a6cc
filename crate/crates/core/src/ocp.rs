//! The discrete free-time problem: costs, endpoint sets, decisions, the
//! discrete objective and constraint residuals.

use std::fmt::Debug;
use std::sync::Arc;

use thiserror::Error;

use crate::approximation::{error_budget, shift_quotients, ErrorBudget, ReferenceSolution};
use crate::controls::{ControlSetA, ControlSetU, GeneratorSign};
use crate::dynamics::{cone_fit, PerturbationMap, Sign, ACTIVE_TOL};
use crate::geometry::ConstraintSet;
use crate::linalg::{nnls, Quadrature, Vector};

/// Errors raised by the discrete problem layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("malformed decision: {0}")]
    MalformedDecision(String),
    #[error("cost evaluation left the effective domain: {0}")]
    EvaluationFailure(String),
}

/// Terminal cost `φ(x, T)` with a subgradient selection.
pub trait TerminalCost: Debug + Send + Sync {
    /// `φ(x, T)`.
    fn value(&self, x: &Vector, horizon: f64) -> f64;
    /// A subgradient `(∂_x φ, ∂_T φ)`.
    fn subgradient(&self, x: &Vector, horizon: f64) -> (Vector, f64);
}

/// Running cost `ℓ(t, x, u, a, ẋ, u̇)` with its gradient.
pub trait RunningCost: Debug + Send + Sync {
    /// `ℓ(t, x, u, a, ẋ, u̇)`.
    fn value(&self, t: f64, x: &Vector, u: &Vector, a: &Vector, xd: &Vector, ud: &Vector) -> f64;
    /// Gradient with respect to `(x, u, a, ẋ, u̇)`.
    fn gradient(&self, t: f64, x: &Vector, u: &Vector, a: &Vector, xd: &Vector, ud: &Vector) -> RunningGradient;
}

/// Partial gradients of a running cost.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningGradient {
    /// `∇_x ℓ`.
    pub x: Vector,
    /// `∇_u ℓ`.
    pub u: Vector,
    /// `∇_a ℓ`.
    pub a: Vector,
    /// `∇_ẋ ℓ`.
    pub xd: Vector,
    /// `∇_u̇ ℓ`.
    pub ud: Vector,
}

/// `φ ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroTerminal;

impl TerminalCost for ZeroTerminal {
    fn value(&self, _: &Vector, _: f64) -> f64 {
        0.0
    }
    fn subgradient(&self, x: &Vector, _: f64) -> (Vector, f64) {
        (Vector::zeros(x.len()), 0.0)
    }
}

/// `φ(x, T) = ‖x − target‖₁ + τT`.
///
/// At a kink `x_i = target_i` the subgradient selection `kink` (in `[−1, 1]`) is used.
#[derive(Debug, Clone, PartialEq)]
pub struct L1Terminal {
    /// Target point.
    pub target: Vector,
    /// Time weight `τ`.
    pub tau: f64,
    /// Subgradient selection at kinks.
    pub kink: f64,
}

impl TerminalCost for L1Terminal {
    fn value(&self, x: &Vector, horizon: f64) -> f64 {
        (x - &self.target).abs().sum() + self.tau * horizon
    }
    fn subgradient(&self, x: &Vector, _: f64) -> (Vector, f64) {
        let g = Vector::from_iterator(
            x.len(),
            (0..x.len()).map(|i| {
                let d = x[i] - self.target[i];
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    self.kink
                }
            }),
        );
        (g, self.tau)
    }
}

/// `φ(x, T) = Σ_i (target_i − x_i) + τT`: remaining signed distance plus a time charge.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressTerminal {
    /// Target point.
    pub target: Vector,
    /// Time weight `τ`.
    pub tau: f64,
}

impl TerminalCost for ProgressTerminal {
    fn value(&self, x: &Vector, horizon: f64) -> f64 {
        (&self.target - x).sum() + self.tau * horizon
    }
    fn subgradient(&self, x: &Vector, _: f64) -> (Vector, f64) {
        (Vector::from_element(x.len(), -1.0), self.tau)
    }
}

/// `ℓ ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroRunning;

impl RunningCost for ZeroRunning {
    fn value(&self, _: f64, _: &Vector, _: &Vector, _: &Vector, _: &Vector, _: &Vector) -> f64 {
        0.0
    }
    fn gradient(&self, _: f64, x: &Vector, u: &Vector, a: &Vector, xd: &Vector, ud: &Vector) -> RunningGradient {
        RunningGradient {
            x: Vector::zeros(x.len()),
            u: Vector::zeros(u.len()),
            a: Vector::zeros(a.len()),
            xd: Vector::zeros(xd.len()),
            ud: Vector::zeros(ud.len()),
        }
    }
}

/// `ℓ = ½‖a‖²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ControlEnergy;

impl RunningCost for ControlEnergy {
    fn value(&self, _: f64, _: &Vector, _: &Vector, a: &Vector, _: &Vector, _: &Vector) -> f64 {
        0.5 * a.norm_squared()
    }
    fn gradient(&self, _: f64, x: &Vector, u: &Vector, a: &Vector, xd: &Vector, ud: &Vector) -> RunningGradient {
        RunningGradient {
            x: Vector::zeros(x.len()),
            u: Vector::zeros(u.len()),
            a: a.clone(),
            xd: Vector::zeros(xd.len()),
            ud: Vector::zeros(ud.len()),
        }
    }
}

/// Endpoint sets with closed-form projections and normal cones.
#[derive(Debug, Clone, PartialEq)]
pub enum EndpointSet {
    /// The whole space.
    AllSpace,
    /// A single point.
    Point(Vector),
    /// A box.
    Box { lower: Vector, upper: Vector },
    /// `[lower, ∞)` in one dimension.
    HalfLine { lower: f64 },
}

impl EndpointSet {
    /// Euclidean projection.
    pub fn project(&self, z: &Vector) -> Vector {
        match self {
            Self::AllSpace => z.clone(),
            Self::Point(p) => p.clone(),
            Self::Box { lower, upper } => Vector::from_iterator(z.len(), (0..z.len()).map(|i| z[i].clamp(lower[i], upper[i]))),
            Self::HalfLine { lower } => z.map(|v| v.max(*lower)),
        }
    }

    /// Euclidean distance.
    pub fn distance(&self, z: &Vector) -> f64 {
        (self.project(z) - z).norm()
    }

    /// Generators of the normal cone to `Ξ + r·B` at `z`.
    pub fn normal_cone_generators(&self, z: &Vector, inflate: f64) -> Vec<(Vector, GeneratorSign)> {
        let n = z.len();
        let dist = self.distance(z);
        let tol = 1e-12 * (1.0 + z.norm());
        if inflate > 0.0 || dist > tol {
            if dist >= inflate - tol && dist > tol {
                let dir = (z - self.project(z)) / dist;
                return vec![(dir, GeneratorSign::Nonnegative)];
            }
            if dist < inflate - tol {
                return Vec::new();
            }
        }
        let unit = |i: usize, s: f64| {
            let mut e = Vector::zeros(n);
            e[i] = s;
            e
        };
        match self {
            Self::AllSpace => Vec::new(),
            Self::Point(_) => (0..n).map(|i| (unit(i, 1.0), GeneratorSign::Free)).collect(),
            Self::Box { lower, upper } => {
                let mut out = Vec::new();
                for i in 0..n {
                    let lo = (z[i] - lower[i]).abs() <= tol;
                    let hi = (z[i] - upper[i]).abs() <= tol;
                    match (lo, hi) {
                        (true, true) => out.push((unit(i, 1.0), GeneratorSign::Free)),
                        (true, false) => out.push((unit(i, -1.0), GeneratorSign::Nonnegative)),
                        (false, true) => out.push((unit(i, 1.0), GeneratorSign::Nonnegative)),
                        _ => {}
                    }
                }
                out
            }
            Self::HalfLine { lower } => {
                if (z[0] - lower).abs() <= tol {
                    vec![(unit(0, -1.0), GeneratorSign::Nonnegative)]
                } else {
                    Vec::new()
                }
            }
        }
    }

    /// `dist(w; N_{Ξ + r·B}(z))`.
    pub fn normal_cone_distance(&self, z: &Vector, w: &Vector, inflate: f64) -> f64 {
        cone_distance(&self.normal_cone_generators(z, inflate), w)
    }
}

/// Distance from `w` to the cone spanned by sign-constrained generators.
pub fn cone_distance(generators: &[(Vector, GeneratorSign)], w: &Vector) -> f64 {
    if generators.is_empty() {
        return w.norm();
    }
    // Free generators enter as a ± pair so a single NNLS covers both kinds.
    let mut cols = Vec::new();
    for (g, s) in generators {
        cols.push(g.clone());
        if *s == GeneratorSign::Free {
            cols.push(-g);
        }
    }
    let m = crate::linalg::Matrix::from_columns(&cols);
    nnls(&m, w).residual
}

/// The discrete problem on `k` cells.
#[derive(Debug, Clone)]
pub struct SweepingOCP {
    /// The set `C`.
    pub geometry: ConstraintSet,
    /// The perturbation `f`.
    pub dynamics: PerturbationMap,
    /// Orientation of `f` in the inclusion.
    pub sign: Sign,
    /// Shift constraints `U`.
    pub shift_set: ControlSetU,
    /// Control values `A`.
    pub control_set: ControlSetA,
    /// `φ`.
    pub terminal: Arc<dyn TerminalCost>,
    /// `ℓ`.
    pub running: Arc<dyn RunningCost>,
    /// `Ξ_x`.
    pub xi_x: EndpointSet,
    /// `Ξ_T`.
    pub xi_t: EndpointSet,
    /// Localization reference `(x̄, ū, ā, T̄)`.
    pub reference: ReferenceSolution,
    /// Initial state `x_0`.
    pub x0: Vector,
    /// Localization radius `ε`.
    pub epsilon: f64,
    /// Number of cells.
    pub k: usize,
    /// Gauss–Legendre points per cell.
    pub quadrature_points: usize,
}

impl SweepingOCP {
    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), OcpError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(OcpError::InvalidProblem(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.k < 2 {
            return Err(OcpError::InvalidProblem(format!("k must be at least 2, got {}", self.k)));
        }
        let n = self.geometry.dim();
        if self.x0.len() != n || self.dynamics.state_dim() != n || self.reference.state_dim() != n {
            return Err(OcpError::InvalidProblem("state dimensions disagree".into()));
        }
        if self.dynamics.control_dim() != self.control_set.dim() || self.reference.control_dim() != self.control_set.dim() {
            return Err(OcpError::InvalidProblem("control dimensions disagree".into()));
        }
        Ok(())
    }

    /// Reference horizon `T̄`.
    pub fn t_bar(&self) -> f64 {
        self.reference.horizon()
    }

    /// Error budget for this `k`.
    pub fn budget(&self) -> ErrorBudget {
        error_budget(&self.reference, &self.dynamics, self.k)
    }

    /// Quadrature rule used for cell integrals.
    pub fn quadrature(&self) -> Quadrature {
        Quadrature::gauss(self.quadrature_points)
    }
}

/// A full decision `(x_0..x_k, u_0..u_k, a_0..a_{k−1}, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDecision {
    /// States.
    pub x: Vec<Vector>,
    /// Shifts.
    pub u: Vec<Vector>,
    /// Controls.
    pub a: Vec<Vector>,
    /// Horizon.
    pub horizon: f64,
}

impl DiscreteDecision {
    /// Validates lengths, finiteness and `T > 0`.
    pub fn validate(&self) -> Result<(), OcpError> {
        let k = self.a.len();
        if k == 0 || self.x.len() != k + 1 || self.u.len() != k + 1 {
            return Err(OcpError::MalformedDecision("expected k+1 states and shifts for k controls".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(OcpError::MalformedDecision(format!("horizon must be positive, got {}", self.horizon)));
        }
        let finite = |v: &Vec<Vector>| v.iter().all(|x| x.iter().all(|c| c.is_finite()));
        if !(finite(&self.x) && finite(&self.u) && finite(&self.a)) {
            return Err(OcpError::MalformedDecision("non-finite entry".into()));
        }
        Ok(())
    }

    /// Number of cells.
    pub fn k(&self) -> usize {
        self.a.len()
    }

    /// Step `h = T/k`.
    pub fn h(&self) -> f64 {
        self.horizon / self.k() as f64
    }

    /// Mesh node `t_j = jT/k`.
    pub fn time(&self, j: usize) -> f64 {
        self.horizon * j as f64 / self.k() as f64
    }

    /// `(x_{j+1} − x_j)/h`.
    pub fn x_quotient(&self, j: usize) -> Vector {
        (&self.x[j + 1] - &self.x[j]) / self.h()
    }

    /// `(u_{j+1} − u_j)/h`.
    pub fn u_quotient(&self, j: usize) -> Vector {
        (&self.u[j + 1] - &self.u[j]) / self.h()
    }

    /// Samples the reference on its own uniform mesh.
    pub fn from_reference(reference: &ReferenceSolution, k: usize) -> Self {
        let horizon = reference.horizon();
        let t = |j: usize| horizon * j as f64 / k as f64;
        Self {
            x: (0..=k).map(|j| reference.x(t(j))).collect(),
            u: (0..=k).map(|j| reference.u(t(j))).collect(),
            a: (0..k).map(|j| reference.a(t(j))).collect(),
            horizon,
        }
    }
}

/// Terms of the discrete objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    /// `φ(x_k, T)`.
    pub terminal: f64,
    /// `Σ h ℓ`.
    pub running: f64,
    /// `½(T − T̄)²`.
    pub time_penalty: f64,
    /// `½Σ∫‖(a_j, Δx/h, Δu/h) − (ā, ẋ̄, u̇̄)‖²`.
    pub proximity: f64,
    /// `dist²(‖Δu_0/h‖; (−∞, μ̃])`.
    pub first_quotient_penalty: f64,
    /// `dist²(Σ‖second differences‖/h; (−∞, μ̃])`.
    pub variation_penalty: f64,
    /// Sum of all terms.
    pub total: f64,
}

fn check_shapes(p: &SweepingOCP, d: &DiscreteDecision) -> Result<(), OcpError> {
    d.validate()?;
    let n = p.geometry.dim();
    if d.x.iter().chain(&d.u).any(|v| v.len() != n) || d.a.iter().any(|a| a.len() != p.control_set.dim()) {
        return Err(OcpError::MalformedDecision("vector dimensions disagree with the problem".into()));
    }
    Ok(())
}

/// Evaluates the discrete objective.
pub fn cost_jk(p: &SweepingOCP, d: &DiscreteDecision, t_bar: f64, mu_tilde: f64) -> Result<(f64, CostBreakdown), OcpError> {
    check_shapes(p, d)?;
    let k = d.k();
    let h = d.h();
    let quad = p.quadrature();
    let terminal = p.terminal.value(&d.x[k], d.horizon);
    let mut running = 0.0;
    let mut proximity = 0.0;
    for j in 0..k {
        let xq = d.x_quotient(j);
        let uq = d.u_quotient(j);
        running += h * p.running.value(d.time(j), &d.x[j], &d.u[j], &d.a[j], &xq, &uq);
        proximity += 0.5 * quad.integrate(d.time(j), d.time(j + 1), |t| {
            (&d.a[j] - p.reference.a(t)).norm_squared()
                + (&xq - p.reference.x_dot(t)).norm_squared()
                + (&uq - p.reference.u_dot(t)).norm_squared()
        });
    }
    let time_penalty = 0.5 * (d.horizon - t_bar).powi(2);
    let (var, first, _) = shift_quotients(&d.u, h);
    let first_quotient_penalty = (first - mu_tilde).max(0.0).powi(2);
    let variation_penalty = (var - mu_tilde).max(0.0).powi(2);
    let total = terminal + running + time_penalty + proximity + first_quotient_penalty + variation_penalty;
    if !total.is_finite() {
        return Err(OcpError::EvaluationFailure(format!("objective is {total}")));
    }
    Ok((total, CostBreakdown { terminal, running, time_penalty, proximity, first_quotient_penalty, variation_penalty, total }))
}

/// Residuals of the discrete constraints; each is zero when the constraint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    /// `max_j dist(−Δx_j/h; F(x_j, u_j, a_j))`.
    pub con1: f64,
    /// The velocity inclusion with the normal cone taken at the next node.
    pub con1_implicit: f64,
    /// `‖x_0 − x0‖ + ‖u_0 − ū(0)‖`.
    pub con2: f64,
    /// Excess of `(x_k, T)` over the inflated endpoint sets.
    pub con2a: f64,
    /// `max(0, T − T̄ − ε)`.
    pub con3: f64,
    /// `max_{j,i} max(0, ν_i(u_j) − L_ν δ_k)`.
    pub con3a: f64,
    /// `max_j dist(a_j; A)`.
    pub con4: f64,
    /// Excess of the state localization integral over `ε/2`.
    pub con5: f64,
    /// Excess of the velocity localization integral over `ε/2`.
    pub con6: f64,
    /// Excess of quotients and variation over `μ̃ + 1`.
    pub con7: f64,
    /// Raw state localization integral.
    pub localization_state: f64,
    /// Raw velocity localization integral.
    pub localization_velocity: f64,
    /// Tolerance used.
    pub tol: f64,
}

impl FeasibilityReport {
    /// Named residuals in constraint order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("con1", self.con1),
            ("con2", self.con2),
            ("con2a", self.con2a),
            ("con3", self.con3),
            ("con3a", self.con3a),
            ("con4", self.con4),
            ("con5", self.con5),
            ("con6", self.con6),
            ("con7", self.con7),
        ]
    }

    /// True when every residual is within the tolerance.
    pub fn passes(&self) -> bool {
        self.entries().iter().all(|(_, r)| *r <= self.tol)
    }

    /// As [`passes`](Self::passes) but reading the velocity inclusion at the next node.
    pub fn passes_implicit(&self) -> bool {
        self.entries().iter().all(|(name, r)| if *name == "con1" { self.con1_implicit <= self.tol } else { *r <= self.tol })
    }
}

/// `dist(w; −cone{∇g_i(x − u)} − σ f(x, a))` plus any infeasibility of `x − u`.
pub fn velocity_inclusion_residual(set: &ConstraintSet, f: &PerturbationMap, sign: Sign, x: &Vector, u: &Vector, a: &Vector, w: &Vector) -> f64 {
    let y = x - u;
    let worst = set.min_value(&y);
    // w = −σf − Gλ  ⇔  −(w + σf) = Gλ.
    let target = -(w + f.value(x, a) * sign.factor());
    let (_, res) = cone_fit(set, &y, &target);
    res + (-worst - ACTIVE_TOL).max(0.0)
}

/// Evaluates all constraint residuals.
pub fn check_constraints(p: &SweepingOCP, d: &DiscreteDecision, tol: f64) -> Result<FeasibilityReport, OcpError> {
    check_shapes(p, d)?;
    let k = d.k();
    let h = d.h();
    let budget = p.budget();
    let quad = p.quadrature();
    let t_bar = p.t_bar();

    let mut con1 = 0.0_f64;
    let mut con1_implicit = 0.0_f64;
    let mut con3a = 0.0_f64;
    let mut con4 = 0.0_f64;
    let mut loc_state = 0.0;
    let mut loc_vel = 0.0;
    let slack = p.shift_set.lipschitz() * budget.delta_k;
    for j in 0..k {
        let xq = d.x_quotient(j);
        let uq = d.u_quotient(j);
        con1 = con1.max(velocity_inclusion_residual(&p.geometry, &p.dynamics, p.sign, &d.x[j], &d.u[j], &d.a[j], &(-&xq)));
        let drift = p.dynamics.value(&d.x[j], &d.a[j]) * p.sign.factor();
        let y_next = &d.x[j + 1] - &d.u[j + 1];
        let (_, res) = cone_fit(&p.geometry, &y_next, &(&xq - drift));
        con1_implicit = con1_implicit.max(res + (-p.geometry.min_value(&y_next) - ACTIVE_TOL).max(0.0));
        for v in p.shift_set.values(&d.u[j]) {
            con3a = con3a.max(v - slack);
        }
        con4 = con4.max(p.control_set.distance(&d.a[j]));
        loc_state += quad.integrate(d.time(j), d.time(j + 1), |t| {
            (&d.x[j] - p.reference.x(t)).norm_squared() + (&d.u[j] - p.reference.u(t)).norm_squared() + (&d.a[j] - p.reference.a(t)).norm_squared()
        });
        loc_vel += quad.integrate(d.time(j), d.time(j + 1), |t| {
            (&xq - p.reference.x_dot(t)).norm_squared() + (&uq - p.reference.u_dot(t)).norm_squared()
        });
    }
    let con2 = (&d.x[0] - &p.x0).norm() + (&d.u[0] - p.reference.u(0.0)).norm();
    let tvec = Vector::from_element(1, d.horizon);
    let con2a = (p.xi_x.distance(&d.x[k]) - budget.mu_x_k).max(0.0).max((p.xi_t.distance(&tvec) - budget.mu_x_k).max(0.0));
    let con3 = (d.horizon - t_bar - p.epsilon).max(0.0);
    let (var, first, last) = shift_quotients(&d.u, h);
    let cap = budget.mu_tilde + 1.0;
    let con7 = (first.max(last) - cap).max(0.0).max((var - cap).max(0.0));
    Ok(FeasibilityReport {
        con1,
        con1_implicit,
        con2,
        con2a,
        con3,
        con3a: con3a.max(0.0),
        con4,
        con5: (loc_state - p.epsilon / 2.0).max(0.0),
        con6: (loc_vel - p.epsilon / 2.0).max(0.0),
        con7,
        localization_state: loc_state,
        localization_velocity: loc_vel,
        tol,
    })
}
