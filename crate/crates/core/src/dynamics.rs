//! Perturbed sweeping dynamics: perturbation maps, control signals, the
//! catching-up simulator and a priori solution bounds.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{project, ConstraintSet, GeometryError};
use crate::linalg::{nnls, Matrix, Vector};

type FieldFn = Arc<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync>;
type JacobianFn = Arc<dyn Fn(&Vector, &Vector) -> Matrix + Send + Sync>;

/// Default activity tolerance on constraint values.
pub const ACTIVE_TOL: f64 = 1e-8;

/// Errors raised by the dynamics layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("initial state violates the moving set (min g = {violation:.3e})")]
    InfeasibleStart { violation: f64 },
    #[error("projection failed at step {step}: {source}")]
    ProjectionFailure { step: usize, source: GeometryError },
    #[error("invalid control signal: {0}")]
    InvalidSignal(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("mesh count must be at least 1")]
    EmptyMesh,
}

/// The perturbation `f(x, a)` with Jacobians and its Lipschitz/growth constants.
#[derive(Clone)]
pub struct PerturbationMap {
    state_dim: usize,
    control_dim: usize,
    value: FieldFn,
    jac_x: JacobianFn,
    jac_a: JacobianFn,
    lipschitz: f64,
    growth: f64,
}

impl fmt::Debug for PerturbationMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PerturbationMap")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("lipschitz", &self.lipschitz)
            .field("growth", &self.growth)
            .finish()
    }
}

/// Sampled audit of the assumptions on `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationReport {
    /// Largest relative mismatch between Jacobians and central differences.
    pub max_jacobian_error: f64,
    /// Largest two-point quotient `‖Δf‖ / (‖Δx‖ + ‖Δa‖)`.
    pub max_lipschitz_quotient: f64,
    /// Largest ratio `‖f(x, a)‖ / (1 + ‖x‖)`.
    pub max_growth_ratio: f64,
    /// True when all sampled quantities respect the declared constants.
    pub holds: bool,
}

impl PerturbationMap {
    /// Wraps user-supplied evaluators.
    #[allow(clippy::too_many_arguments)]
    pub fn new<V, JX, JA>(
        state_dim: usize,
        control_dim: usize,
        value: V,
        jac_x: JX,
        jac_a: JA,
        lipschitz: f64,
        growth: f64,
    ) -> Self
    where
        V: Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
        JX: Fn(&Vector, &Vector) -> Matrix + Send + Sync + 'static,
        JA: Fn(&Vector, &Vector) -> Matrix + Send + Sync + 'static,
    {
        Self {
            state_dim,
            control_dim,
            value: Arc::new(value),
            jac_x: Arc::new(jac_x),
            jac_a: Arc::new(jac_a),
            lipschitz,
            growth,
        }
    }

    /// `f ≡ 0`.
    pub fn zero(state_dim: usize, control_dim: usize) -> Self {
        Self::new(
            state_dim,
            control_dim,
            move |_, _| Vector::zeros(state_dim),
            move |_, _| Matrix::zeros(state_dim, state_dim),
            move |_, _| Matrix::zeros(state_dim, control_dim),
            0.0,
            0.0,
        )
    }

    /// `f(x, a) = A x + B a + c`.
    pub fn linear(a: Matrix, b: Matrix, c: Vector, growth: f64) -> Self {
        let n = a.nrows();
        let d = b.ncols();
        let lipschitz = a.norm().max(b.norm());
        let (a1, b1, a2, b2) = (a.clone(), b.clone(), a, b);
        Self::new(
            n,
            d,
            move |x, u| &a1 * x + &b1 * u + &c,
            move |_, _| a2.clone(),
            move |_, _| b2.clone(),
            lipschitz,
            growth,
        )
    }

    /// `f(x, a) = (a_1 s_1, …, a_n s_n)`: each state coordinate is driven by its own scaled control.
    pub fn control_scaled(speeds: Vector, growth: f64) -> Self {
        let n = speeds.len();
        let lipschitz = speeds.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
        let (s1, s2) = (speeds.clone(), speeds);
        Self::new(
            n,
            n,
            move |_, a| a.component_mul(&s1),
            move |_, _| Matrix::zeros(n, n),
            move |_, _| Matrix::from_diagonal(&s2),
            lipschitz,
            growth,
        )
    }

    /// State dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Control dimension `d`.
    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// Lipschitz constant `L_f`.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Growth constant `M`.
    pub fn growth(&self) -> f64 {
        self.growth
    }

    /// Returns a copy with different declared constants.
    pub fn with_constants(mut self, lipschitz: f64, growth: f64) -> Self {
        self.lipschitz = lipschitz;
        self.growth = growth;
        self
    }

    /// `f(x, a)`.
    pub fn value(&self, x: &Vector, a: &Vector) -> Vector {
        (self.value)(x, a)
    }

    /// `∇_x f(x, a)` as an `n × n` matrix.
    pub fn jac_x(&self, x: &Vector, a: &Vector) -> Matrix {
        (self.jac_x)(x, a)
    }

    /// `∇_a f(x, a)` as an `n × d` matrix.
    pub fn jac_a(&self, x: &Vector, a: &Vector) -> Matrix {
        (self.jac_a)(x, a)
    }

    /// Audits Jacobians, Lipschitz quotients and growth on the given samples.
    pub fn check_assumptions(&self, samples: &[(Vector, Vector)]) -> PerturbationReport {
        let mut jac_err = 0.0_f64;
        let mut lip = 0.0_f64;
        let mut growth = 0.0_f64;
        for (x, a) in samples {
            let jx = self.jac_x(x, a);
            let ja = self.jac_a(x, a);
            let fd_x = fd_jacobian(|z| self.value(z, a), x);
            let fd_a = fd_jacobian(|z| self.value(x, z), a);
            jac_err = jac_err.max((&jx - &fd_x).norm() / (1.0 + jx.norm()));
            jac_err = jac_err.max((&ja - &fd_a).norm() / (1.0 + ja.norm()));
            growth = growth.max(self.value(x, a).norm() / (1.0 + x.norm()));
        }
        for i in 0..samples.len() {
            for j in (i + 1)..samples.len() {
                let (x1, a1) = &samples[i];
                let (x2, a2) = &samples[j];
                let den = (x1 - x2).norm() + (a1 - a2).norm();
                if den > 0.0 {
                    lip = lip.max((self.value(x1, a1) - self.value(x2, a2)).norm() / den);
                }
            }
        }
        let holds = jac_err <= 1e-5 && lip <= self.lipschitz * (1.0 + 1e-6) + 1e-12 && growth <= self.growth * (1.0 + 1e-6) + 1e-12;
        PerturbationReport { max_jacobian_error: jac_err, max_lipschitz_quotient: lip, max_growth_ratio: growth, holds }
    }
}

fn fd_jacobian<F: Fn(&Vector) -> Vector>(f: F, x: &Vector) -> Matrix {
    let m = f(x).len();
    let mut jac = Matrix::zeros(m, x.len());
    for k in 0..x.len() {
        let step = 1e-6 * (1.0 + x[k].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += step;
        xm[k] -= step;
        jac.set_column(k, &((f(&xp) - f(&xm)) / (2.0 * step)));
    }
    jac
}

/// Control pair `(u, a)` on `[0, T]`: `u` piecewise linear through knots, `a`
/// piecewise constant on equal cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    u_times: Vec<f64>,
    u_values: Vec<Vector>,
    a_values: Vec<Vector>,
    horizon: f64,
}

impl ControlSignal {
    /// Validates and builds a signal.
    pub fn new(u_times: Vec<f64>, u_values: Vec<Vector>, a_values: Vec<Vector>, horizon: f64) -> Result<Self, DynamicsError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(DynamicsError::InvalidSignal(format!("horizon must be positive, got {horizon}")));
        }
        if u_times.len() < 2 || u_times.len() != u_values.len() {
            return Err(DynamicsError::InvalidSignal("need at least two u knots with matching values".into()));
        }
        if u_times[0] != 0.0 || (u_times[u_times.len() - 1] - horizon).abs() > 1e-12 * horizon {
            return Err(DynamicsError::InvalidSignal("u knots must span [0, T]".into()));
        }
        if u_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DynamicsError::InvalidSignal("u knot times must be strictly increasing".into()));
        }
        if a_values.is_empty() {
            return Err(DynamicsError::InvalidSignal("need at least one control cell".into()));
        }
        Ok(Self { u_times, u_values, a_values, horizon })
    }

    /// Constant `u` and `a` over `cells` equal cells.
    pub fn constant(u: Vector, a: Vector, horizon: f64, cells: usize) -> Result<Self, DynamicsError> {
        Self::new(vec![0.0, horizon], vec![u.clone(), u], vec![a; cells.max(1)], horizon)
    }

    /// `u` given at the nodes of the uniform mesh `t_j = jT/k` and `a` on its `k` cells.
    pub fn on_mesh(u_nodes: Vec<Vector>, a_cells: Vec<Vector>, horizon: f64) -> Result<Self, DynamicsError> {
        let k = u_nodes.len().saturating_sub(1);
        if k == 0 {
            return Err(DynamicsError::EmptyMesh);
        }
        let times = (0..=k).map(|j| horizon * j as f64 / k as f64).collect();
        Self::new(times, u_nodes, a_cells, horizon)
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Knot times of `u`.
    pub fn u_times(&self) -> &[f64] {
        &self.u_times
    }

    /// Knot values of `u`.
    pub fn u_values(&self) -> &[Vector] {
        &self.u_values
    }

    /// Cell values of `a`.
    pub fn a_values(&self) -> &[Vector] {
        &self.a_values
    }

    /// Same controls on the rescaled horizon `new_horizon`.
    pub fn rescaled(&self, new_horizon: f64) -> Result<Self, DynamicsError> {
        let r = new_horizon / self.horizon;
        let mut times: Vec<f64> = self.u_times.iter().map(|t| t * r).collect();
        let last = times.len() - 1;
        times[last] = new_horizon;
        Self::new(times, self.u_values.clone(), self.a_values.clone(), new_horizon)
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.u_times.len();
        match self.u_times.binary_search_by(|s| s.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    /// `u(t)` by linear interpolation, held constant outside `[0, T]`.
    pub fn u(&self, t: f64) -> Vector {
        if t <= 0.0 {
            return self.u_values[0].clone();
        }
        if t >= self.horizon {
            return self.u_values[self.u_values.len() - 1].clone();
        }
        let i = self.segment(t);
        let (t0, t1) = (self.u_times[i], self.u_times[i + 1]);
        let w = (t - t0) / (t1 - t0);
        &self.u_values[i] * (1.0 - w) + &self.u_values[i + 1] * w
    }

    /// `u̇(t)` on the right-open segment containing `t` (last segment at `t = T`).
    pub fn u_dot(&self, t: f64) -> Vector {
        let i = self.segment(t.clamp(0.0, self.horizon));
        (&self.u_values[i + 1] - &self.u_values[i]) / (self.u_times[i + 1] - self.u_times[i])
    }

    /// `a(t)` by right-open cell lookup; `a(T)` is the last value.
    pub fn a(&self, t: f64) -> Vector {
        self.a_values[self.cell_of(t)].clone()
    }

    /// Index of the `a` cell containing `t`.
    pub fn cell_of(&self, t: f64) -> usize {
        let n = self.a_values.len();
        let pos = (t / self.horizon * n as f64 * (1.0 + 4.0 * f64::EPSILON)).floor();
        if pos <= 0.0 {
            0
        } else {
            (pos as usize).min(n - 1)
        }
    }

    /// `∫₀ᵀ ‖u̇‖`, exact for piecewise-linear `u`.
    pub fn u_variation(&self) -> f64 {
        self.u_values.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum()
    }
}

/// Orientation of the perturbation in the sweeping inclusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sign {
    /// `ẋ ∈ f − N`.
    #[default]
    Plus,
    /// `−ẋ ∈ N + f`, i.e. `ẋ ∈ −f − N`.
    Minus,
}

impl Sign {
    /// `+1` or `−1`.
    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// A discrete trajectory on the uniform mesh `t_j = jT/k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Mesh nodes `t_0..t_k`.
    pub times: Vec<f64>,
    /// States `x_0..x_k`.
    pub states: Vec<Vector>,
    /// Shifts `u(t_0)..u(t_k)`.
    pub shifts: Vec<Vector>,
    /// Controls `a_0..a_{k−1}`.
    pub controls: Vec<Vector>,
    /// Velocities `(x_{j+1} − x_j)/h`.
    pub velocities: Vec<Vector>,
    /// Per-step normal-cone multipliers divided by `h`.
    pub eta: Vec<Vector>,
    /// `dist(v_j − σ f(x_j, a_j); cone{∇g_i(x_j − u_j) : i active})`.
    pub residual: Vec<f64>,
    /// The same distance with the cone taken at `x_{j+1} − u_{j+1}`.
    pub implicit_residual: Vec<f64>,
    /// Orientation used.
    pub sign: Sign,
}

impl Trajectory {
    /// Number of cells `k`.
    pub fn k(&self) -> usize {
        self.velocities.len()
    }

    /// Step `h = T/k`.
    pub fn step(&self) -> f64 {
        self.horizon() / self.k() as f64
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Final state `x_k`.
    pub fn final_state(&self) -> &Vector {
        &self.states[self.states.len() - 1]
    }

    /// Builds a trajectory from given states, recovering `η` and residuals.
    #[allow(clippy::too_many_arguments)]
    pub fn from_states(
        set: &ConstraintSet,
        f: &PerturbationMap,
        times: Vec<f64>,
        states: Vec<Vector>,
        shifts: Vec<Vector>,
        controls: Vec<Vector>,
        sign: Sign,
    ) -> Result<Self, DynamicsError> {
        let k = states.len().saturating_sub(1);
        if k == 0 {
            return Err(DynamicsError::EmptyMesh);
        }
        for (len, expected) in [(times.len(), k + 1), (shifts.len(), k + 1), (controls.len(), k)] {
            if len != expected {
                return Err(DynamicsError::DimensionMismatch { expected, found: len });
            }
        }
        let mut velocities = Vec::with_capacity(k);
        let mut eta = Vec::with_capacity(k);
        let mut residual = Vec::with_capacity(k);
        let mut implicit_residual = Vec::with_capacity(k);
        for j in 0..k {
            let h = times[j + 1] - times[j];
            let v = (&states[j + 1] - &states[j]) / h;
            let drift = f.value(&states[j], &controls[j]) * sign.factor();
            let w = &v - &drift;
            let (lam_new, res_new) = cone_fit(set, &(&states[j + 1] - &shifts[j + 1]), &w);
            let (_, res_old) = cone_fit(set, &(&states[j] - &shifts[j]), &w);
            velocities.push(v);
            eta.push(lam_new);
            residual.push(res_old);
            implicit_residual.push(res_new);
        }
        Ok(Self { times, states, shifts, controls, velocities, eta, residual, implicit_residual, sign })
    }
}

/// Best nonnegative fit of `w` by the active gradients at `y`: returns `(λ, residual)`.
pub fn cone_fit(set: &ConstraintSet, y: &Vector, w: &Vector) -> (Vector, f64) {
    let values = set.values(y);
    let active: Vec<usize> = (0..values.len()).filter(|&i| values[i] <= ACTIVE_TOL).collect();
    let mut lam = Vector::zeros(set.len());
    if active.is_empty() {
        return (lam, w.norm());
    }
    let g = set.gradient_columns(y, &active);
    let sol = nnls(&g, w);
    for (pos, &i) in active.iter().enumerate() {
        lam[i] = sol.x[pos];
    }
    (lam, sol.residual)
}

/// Catching-up scheme `x_{j+1} = Π(x_j + h σ f(x_j, a_j); C + u(t_{j+1}))`.
pub fn catching_up_simulate(
    set: &ConstraintSet,
    f: &PerturbationMap,
    ctrl: &ControlSignal,
    x0: &Vector,
    k: usize,
    sign: Sign,
) -> Result<Trajectory, DynamicsError> {
    if k == 0 {
        return Err(DynamicsError::EmptyMesh);
    }
    if x0.len() != set.dim() {
        return Err(DynamicsError::DimensionMismatch { expected: set.dim(), found: x0.len() });
    }
    let horizon = ctrl.horizon();
    let h = horizon / k as f64;
    let times: Vec<f64> = (0..=k).map(|j| horizon * j as f64 / k as f64).collect();
    let shifts: Vec<Vector> = times.iter().map(|&t| ctrl.u(t)).collect();
    let controls: Vec<Vector> = (0..k)
        .map(|j| if ctrl.a_values().len() == k { ctrl.a_values()[j].clone() } else { ctrl.a(times[j]) })
        .collect();
    let start = set.min_value(&(x0 - &shifts[0]));
    if start < -1e-9 {
        return Err(DynamicsError::InfeasibleStart { violation: start });
    }

    let mut states = Vec::with_capacity(k + 1);
    let mut velocities = Vec::with_capacity(k);
    let mut eta = Vec::with_capacity(k);
    let mut residual = Vec::with_capacity(k);
    let mut implicit_residual = Vec::with_capacity(k);
    states.push(x0.clone());
    for j in 0..k {
        let x = &states[j];
        let drift = f.value(x, &controls[j]) * sign.factor();
        let z = x + &drift * h;
        let p = project(set, &z, &shifts[j + 1]).map_err(|source| DynamicsError::ProjectionFailure { step: j, source })?;
        let v = (&p.point - x) / h;
        let w = &v - &drift;
        let (_, res_old) = cone_fit(set, &(x - &shifts[j]), &w);
        let lam = &p.multipliers / h;
        let mut recon = w.clone();
        for i in 0..set.len() {
            if lam[i] != 0.0 {
                recon -= set.constraints()[i].gradient(&(&p.point - &shifts[j + 1])) * lam[i];
            }
        }
        residual.push(res_old);
        implicit_residual.push(recon.norm());
        velocities.push(v);
        eta.push(lam);
        states.push(p.point);
    }
    Ok(Trajectory { times, states, shifts, controls, velocities, eta, residual, implicit_residual, sign })
}

/// Bounds `‖x(t)‖ ≤ l` and `‖ẋ(t)‖ ≤ 2(1 + l)M + ‖u̇(t)‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBounds {
    /// The state bound `l`.
    pub l: f64,
    /// Growth constant `M` used.
    pub growth: f64,
    signal: ControlSignal,
}

impl StateBounds {
    /// Velocity bound at time `t`.
    pub fn velocity_bound(&self, t: f64) -> f64 {
        2.0 * (1.0 + self.l) * self.growth + self.signal.u_dot(t).norm()
    }
}

/// `l = ‖x0‖ + e^{2MT}(2MT(1 + ‖x0‖) + ∫‖u̇‖)`.
pub fn estimate_bounds(f: &PerturbationMap, ctrl: &ControlSignal, x0: &Vector) -> StateBounds {
    let m = f.growth();
    let t = ctrl.horizon();
    let n0 = x0.norm();
    let l = n0 + (2.0 * m * t).exp() * (2.0 * m * t * (1.0 + n0) + ctrl.u_variation());
    StateBounds { l, growth: m, signal: ctrl.clone() }
}

/// Result of [`verify_feasibility`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityCheck {
    /// `min_{j,i} g_i(x_j − u_j)`.
    pub min_value: f64,
    /// Node and constraint attaining the minimum.
    pub worst: (usize, usize),
    /// True when `min_value ≥ −tol`.
    pub passes: bool,
}

/// Minimum constraint value along a trajectory, using its stored shifts.
pub fn verify_feasibility(set: &ConstraintSet, traj: &Trajectory, tol: f64) -> FeasibilityCheck {
    let mut min_value = f64::INFINITY;
    let mut worst = (0, 0);
    for (j, (x, u)) in traj.states.iter().zip(&traj.shifts).enumerate() {
        for (i, g) in set.values(&(x - u)).into_iter().enumerate() {
            if g < min_value {
                min_value = g;
                worst = (j, i);
            }
        }
    }
    FeasibilityCheck { min_value, worst, passes: min_value >= -tol }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{GeometryConstants, SmoothConstraint};
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from_vec(x.to_vec())
    }

    fn corridor() -> ConstraintSet {
        let g = SmoothConstraint::affine(v(&[-1.0, 1.0]), -6.0);
        let k = GeometryConstants { m1: 1.0, m2: 2.0, m3: 0.0, beta: 1.0, rho: 1.0, c: 1e6 };
        ConstraintSet::new(vec![g], k).unwrap()
    }

    fn disk_complement() -> ConstraintSet {
        let g = SmoothConstraint::quadratic(Matrix::identity(2, 2), Vector::zeros(2), -1.0);
        let k = GeometryConstants { m1: 1.0, m2: 4.0, m3: 2.0, beta: 1.0, rho: 0.5, c: 0.5 };
        ConstraintSet::new(vec![g], k).unwrap()
    }

    #[test]
    fn control_signal_evaluation() {
        let c = ControlSignal::new(vec![0.0, 1.0, 3.0], vec![v(&[0.0]), v(&[2.0]), v(&[0.0])], vec![v(&[1.0]), v(&[2.0]), v(&[3.0])], 3.0)
            .unwrap();
        assert_eq!(c.u(0.5), v(&[1.0]));
        assert_eq!(c.u(2.0), v(&[1.0]));
        assert_eq!(c.u_dot(0.5), v(&[2.0]));
        assert_eq!(c.u_dot(1.0), v(&[-1.0]));
        assert_eq!(c.a(0.0), v(&[1.0]));
        assert_eq!(c.a(1.0), v(&[2.0]));
        assert_eq!(c.a(3.0), v(&[3.0]));
        assert_eq!(c.u_variation(), 4.0);
    }

    #[test]
    fn control_signal_validation() {
        assert!(ControlSignal::new(vec![0.0, 0.0], vec![v(&[0.0]), v(&[0.0])], vec![v(&[0.0])], 1.0).is_err());
        assert!(ControlSignal::new(vec![0.0, 1.0], vec![v(&[0.0]), v(&[0.0])], vec![v(&[0.0])], 2.0).is_err());
        assert!(ControlSignal::new(vec![0.0, 1.0], vec![v(&[0.0]), v(&[0.0])], vec![], 1.0).is_err());
    }

    #[test]
    fn stationary_point_stays_put() {
        let set = disk_complement();
        let f = PerturbationMap::zero(2, 1);
        let ctrl = ControlSignal::constant(v(&[0.0, 0.0]), v(&[0.0]), 1.0, 4).unwrap();
        let x0 = v(&[2.0, 0.0]);
        let traj = catching_up_simulate(&set, &f, &ctrl, &x0, 20, Sign::Plus).unwrap();
        assert!(traj.states.iter().all(|x| *x == x0));
        assert!(traj.eta.iter().all(|e| e.norm() == 0.0));
    }

    #[test]
    fn interior_motion_is_explicit_euler() {
        let set = corridor();
        let f = PerturbationMap::linear(Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.1]), Matrix::zeros(2, 1), v(&[-1.0, 0.0]), 1.0);
        let ctrl = ControlSignal::constant(v(&[0.0, 0.0]), v(&[0.0]), 1.0, 1).unwrap();
        let x0 = v(&[0.0, 10.0]);
        let traj = catching_up_simulate(&set, &f, &ctrl, &x0, 8, Sign::Plus).unwrap();
        let mut x = x0.clone();
        for j in 0..8 {
            x = &x + f.value(&x, &v(&[0.0])) * 0.125;
            assert_eq!(traj.states[j + 1], x);
        }
    }

    #[test]
    fn corridor_contact_moves_agents_together() {
        let set = corridor();
        let f = PerturbationMap::control_scaled(v(&[1.6_f64.sqrt(), 0.4_f64.sqrt()]), 2.0);
        let a = v(&[1.6_f64.sqrt(), 0.4_f64.sqrt()]);
        let ctrl = ControlSignal::constant(v(&[0.0, 0.0]), a, 20.0, 1).unwrap();
        let traj = catching_up_simulate(&set, &f, &ctrl, &v(&[-48.0, -24.0]), 2000, Sign::Plus).unwrap();
        // Gap closes at 1.2 per unit time from 18, then both move at the mean speed 1.
        let last = traj.velocities.last().unwrap();
        assert!((last[0] - 1.0).abs() < 1e-9 && (last[1] - 1.0).abs() < 1e-9);
        assert!((traj.eta.last().unwrap()[0] - 0.6).abs() < 1e-9);
        let check = verify_feasibility(&set, &traj, 1e-9);
        assert!(check.passes);
        assert!(check.min_value.abs() < 1e-9);
        assert!(traj.implicit_residual.iter().all(|r| *r < 1e-9));
    }

    #[test]
    fn minus_sign_realizes_reversed_drift() {
        let set = corridor();
        let f = PerturbationMap::control_scaled(v(&[1.0, 1.0]), 2.0);
        let ctrl = ControlSignal::constant(v(&[0.0, 0.0]), v(&[-1.0, 0.5]), 10.0, 1).unwrap();
        let traj = catching_up_simulate(&set, &f, &ctrl, &v(&[0.0, 7.0]), 500, Sign::Minus).unwrap();
        for (j, r) in traj.implicit_residual.iter().enumerate() {
            let fnorm = f.value(&traj.states[j], &traj.controls[j]).norm();
            assert!(*r <= 1e-7 * (1.0 + fnorm));
        }
        assert!(verify_feasibility(&set, &traj, 1e-9).passes);
    }

    #[test]
    fn moving_set_pushes_state() {
        let set = disk_complement();
        let f = PerturbationMap::zero(2, 1);
        let ctrl = ControlSignal::new(vec![0.0, 1.0], vec![v(&[0.0, 0.0]), v(&[0.5, 0.0])], vec![v(&[0.0])], 1.0).unwrap();
        let traj = catching_up_simulate(&set, &f, &ctrl, &v(&[1.0, 0.0]), 100, Sign::Plus).unwrap();
        assert!((traj.final_state() - v(&[1.5, 0.0])).norm() < 1e-9);
        assert!(verify_feasibility(&set, &traj, 1e-9).passes);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let set = corridor();
        let f = PerturbationMap::zero(2, 1);
        let ctrl = ControlSignal::constant(v(&[0.0, 0.0]), v(&[0.0]), 1.0, 1).unwrap();
        let err = catching_up_simulate(&set, &f, &ctrl, &v(&[0.0, 1.0]), 4, Sign::Plus).unwrap_err();
        assert!(matches!(err, DynamicsError::InfeasibleStart { .. }));
    }

    #[test]
    fn bound_examples() {
        let ctrl = ControlSignal::constant(v(&[0.0]), v(&[0.0]), 1.0, 1).unwrap();
        let b = estimate_bounds(&PerturbationMap::zero(1, 1), &ctrl, &v(&[3.0]));
        assert_eq!(b.l, 3.0);
        assert_eq!(b.velocity_bound(0.5), 0.0);
        let f = PerturbationMap::zero(1, 1).with_constants(0.0, 1.0);
        let b = estimate_bounds(&f, &ctrl, &v(&[0.0]));
        let expected = 2.0 * 1.0_f64.exp().powi(2);
        assert!((b.l - expected).abs() < 1e-12);
        assert!((b.l - 14.778).abs() < 1e-3);
        assert!((b.velocity_bound(0.3) - 2.0 * (1.0 + expected)).abs() < 1e-12);
        let ramp = ControlSignal::new(vec![0.0, 1.0], vec![v(&[0.0]), v(&[1.0])], vec![v(&[0.0])], 1.0).unwrap();
        let b = estimate_bounds(&PerturbationMap::zero(1, 1), &ramp, &v(&[2.0]));
        assert_eq!(b.l, 3.0);
    }

    #[test]
    fn feasibility_report_names_violation() {
        let set = corridor();
        let traj = Trajectory::from_states(
            &set,
            &PerturbationMap::zero(2, 1),
            vec![0.0, 1.0, 2.0],
            vec![v(&[0.0, 7.0]), v(&[0.0, 5.0]), v(&[0.0, 8.0])],
            vec![Vector::zeros(2); 3],
            vec![v(&[0.0]); 2],
            Sign::Plus,
        )
        .unwrap();
        let check = verify_feasibility(&set, &traj, 1e-9);
        assert!(!check.passes);
        assert_eq!(check.worst, (1, 0));
        assert!((check.min_value + 1.0).abs() < 1e-15);
    }

    #[test]
    fn perturbation_audit() {
        let f = PerturbationMap::control_scaled(v(&[2.0, 0.5]), 4.0);
        let samples: Vec<_> = (0..5).map(|i| (v(&[i as f64, -1.0]), v(&[1.0 - 0.3 * i as f64, 0.2 * i as f64]))).collect();
        let report = f.check_assumptions(&samples);
        assert!(report.holds, "{report:?}");
        assert!(report.max_lipschitz_quotient <= 2.0);
        let lying = f.with_constants(0.1, 4.0);
        assert!(!lying.check_assumptions(&samples).holds);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn simulated_states_respect_bounds_and_feasibility(
            ax in -1.0..1.0f64, ay in -1.0..1.0f64, x0 in 1.2..3.0f64, angle in 0.0..6.28f64, k in 10usize..80
        ) {
            let set = disk_complement();
            let f = PerturbationMap::control_scaled(v(&[1.0, 1.0]), 1.0);
            let ctrl = ControlSignal::constant(Vector::zeros(2), v(&[ax, ay]), 1.0, 1).unwrap();
            let start = v(&[x0 * angle.cos(), x0 * angle.sin()]);
            // Growth holds with M = ‖a‖ since ‖f‖ = ‖a‖ ≤ ‖a‖(1 + ‖x‖).
            let f = f.with_constants(1.0, v(&[ax, ay]).norm());
            let traj = catching_up_simulate(&set, &f, &ctrl, &start, k, Sign::Plus).unwrap();
            prop_assert!(verify_feasibility(&set, &traj, 1e-9).passes);
            let b = estimate_bounds(&f, &ctrl, &start);
            for (j, x) in traj.states.iter().enumerate() {
                prop_assert!(x.norm() <= b.l + 1e-6);
                if j < traj.k() {
                    prop_assert!(traj.velocities[j].norm() <= b.velocity_bound(traj.times[j]) + 1e-6);
                }
            }
        }
    }
}
