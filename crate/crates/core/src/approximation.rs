//! Discrete approximation of a feasible reference process: control sampling,
//! the approximant recurrence, explicit error budgets and realized errors.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::dynamics::{PerturbationMap, Trajectory, ACTIVE_TOL};
use crate::geometry::ConstraintSet;
use crate::linalg::{nnls, Quadrature, Vector};

type PathFn = Arc<dyn Fn(f64) -> Vector + Send + Sync>;
type SidedFn = Arc<dyn Fn(f64, Side) -> Vector + Send + Sync>;

/// Errors raised while building approximants.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApproximationError {
    #[error("invalid reference: {0}")]
    InvalidReference(String),
    #[error("point is outside the moving set (min g = {violation:.3e})")]
    NotInSet { violation: f64 },
    #[error("velocity projection at step {step} is {distance:.3e} away, above the admissible {limit:.3e}")]
    VelocityProjectionFailure { step: usize, distance: f64, limit: f64 },
    #[error("mesh count must be at least 1")]
    EmptyMesh,
}

/// Which one-sided limit to take at a kink.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Limit from the left.
    Left,
    /// Limit from the right.
    Right,
}

/// A feasible continuous-time process `(x, u, a)` on `[0, T̄]` with variation bound `μ`.
///
/// Beyond `T̄` the state and shift are held at their final values (zero
/// derivatives) and `a` keeps its final value.
#[derive(Clone)]
pub struct ReferenceSolution {
    state_dim: usize,
    control_dim: usize,
    horizon: f64,
    mu: f64,
    x: PathFn,
    x_dot: SidedFn,
    u: PathFn,
    u_dot: SidedFn,
    a: SidedFn,
}

impl fmt::Debug for ReferenceSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReferenceSolution")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("horizon", &self.horizon)
            .field("mu", &self.mu)
            .finish()
    }
}

impl ReferenceSolution {
    /// Wraps samplers for `x`, `ẋ`, `u`, `u̇` and `a` on `[0, horizon]`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_fns<X, XD, U, UD, A>(
        state_dim: usize,
        control_dim: usize,
        horizon: f64,
        mu: f64,
        x: X,
        x_dot: XD,
        u: U,
        u_dot: UD,
        a: A,
    ) -> Result<Self, ApproximationError>
    where
        X: Fn(f64) -> Vector + Send + Sync + 'static,
        XD: Fn(f64, Side) -> Vector + Send + Sync + 'static,
        U: Fn(f64) -> Vector + Send + Sync + 'static,
        UD: Fn(f64, Side) -> Vector + Send + Sync + 'static,
        A: Fn(f64) -> Vector + Send + Sync + 'static,
    {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ApproximationError::InvalidReference(format!("horizon must be positive, got {horizon}")));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(ApproximationError::InvalidReference(format!("variation bound must be positive, got {mu}")));
        }
        Ok(Self {
            state_dim,
            control_dim,
            horizon,
            mu,
            x: Arc::new(x),
            x_dot: Arc::new(x_dot),
            u: Arc::new(u),
            u_dot: Arc::new(u_dot),
            a: Arc::new(move |t, _| a(t)),
        })
    }

    /// Piecewise-linear `x`, `u` through knots and piecewise-constant `a` on the knot segments.
    pub fn piecewise_linear(
        times: Vec<f64>,
        x_nodes: Vec<Vector>,
        u_nodes: Vec<Vector>,
        a_cells: Vec<Vector>,
        mu: f64,
    ) -> Result<Self, ApproximationError> {
        let n = times.len();
        if n < 2 || x_nodes.len() != n || u_nodes.len() != n || a_cells.len() != n - 1 {
            return Err(ApproximationError::InvalidReference("knot, node and cell counts are inconsistent".into()));
        }
        if times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ApproximationError::InvalidReference("knot times must start at 0 and increase".into()));
        }
        let horizon = times[n - 1];
        let state_dim = x_nodes[0].len();
        let control_dim = a_cells[0].len();
        let knots = Arc::new(times);
        let xs = Arc::new(x_nodes);
        let us = Arc::new(u_nodes);
        let cells = Arc::new(a_cells);
        let (k1, k2, k3, k4, k5) = (knots.clone(), knots.clone(), knots.clone(), knots.clone(), knots);
        let (x1, x2, u1, u2) = (xs.clone(), xs, us.clone(), us);
        let mut out = Self::from_fns(
            state_dim,
            control_dim,
            horizon,
            mu,
            move |t| interpolate(&k1, &x1, t),
            move |t, side| slope(&k2, &x2, t, side),
            move |t| interpolate(&k3, &u1, t),
            move |t, side| slope(&k4, &u2, t, side),
            |_| Vector::zeros(0),
        )?;
        out.a = Arc::new(move |t, side| cells[segment(&k5, t, side)].clone());
        Ok(out)
    }

    /// Reference given by a discrete trajectory, interpolated linearly.
    pub fn from_trajectory(traj: &Trajectory, mu: f64) -> Result<Self, ApproximationError> {
        Self::piecewise_linear(traj.times.clone(), traj.states.clone(), traj.shifts.clone(), traj.controls.clone(), mu)
    }

    /// State dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Control dimension `d`.
    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// Horizon `T̄`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Variation bound `μ`.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// `x(t)`, held constant after `T̄`.
    pub fn x(&self, t: f64) -> Vector {
        (self.x)(t.clamp(0.0, self.horizon))
    }

    /// `ẋ(t)` with the right limit at kinks.
    pub fn x_dot(&self, t: f64) -> Vector {
        self.x_dot_side(t, Side::Right)
    }

    /// One-sided `ẋ(t)`; zero beyond `T̄`.
    pub fn x_dot_side(&self, t: f64, side: Side) -> Vector {
        if t > self.horizon || (t == self.horizon && side == Side::Right) {
            return Vector::zeros(self.state_dim);
        }
        (self.x_dot)(t.max(0.0), side)
    }

    /// `u(t)`, held constant after `T̄`.
    pub fn u(&self, t: f64) -> Vector {
        (self.u)(t.clamp(0.0, self.horizon))
    }

    /// `u̇(t)` with the right limit at kinks.
    pub fn u_dot(&self, t: f64) -> Vector {
        self.u_dot_side(t, Side::Right)
    }

    /// One-sided `u̇(t)`; zero beyond `T̄`.
    pub fn u_dot_side(&self, t: f64, side: Side) -> Vector {
        if t > self.horizon || (t == self.horizon && side == Side::Right) {
            return Vector::zeros(self.state_dim);
        }
        (self.u_dot)(t.max(0.0), side)
    }

    /// `a(t)`, held at its final value after `T̄`.
    pub fn a(&self, t: f64) -> Vector {
        self.a_side(t, Side::Right)
    }

    /// One-sided `a(t)`; samplers given as plain functions ignore the side.
    pub fn a_side(&self, t: f64, side: Side) -> Vector {
        (self.a)(t.clamp(0.0, self.horizon), side)
    }

    /// Minimum of `g_i(x(t) − u(t))` over an audit grid of `points + 1` times.
    pub fn audit_feasibility(&self, set: &ConstraintSet, points: usize) -> f64 {
        let n = points.max(1);
        (0..=n)
            .map(|i| {
                let t = self.horizon * i as f64 / n as f64;
                set.min_value(&(self.x(t) - self.u(t)))
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn segment(times: &[f64], t: f64, side: Side) -> usize {
    let n = times.len();
    let idx = times.partition_point(|s| *s <= t);
    let right = idx.saturating_sub(1).min(n - 2);
    match side {
        Side::Right => right,
        Side::Left => {
            if idx >= 1 && idx <= n && times[idx - 1] == t && idx >= 2 {
                idx - 2
            } else {
                right
            }
        }
    }
}

fn interpolate(times: &[f64], nodes: &[Vector], t: f64) -> Vector {
    let i = segment(times, t, Side::Right);
    let w = (t - times[i]) / (times[i + 1] - times[i]);
    &nodes[i] * (1.0 - w) + &nodes[i + 1] * w
}

fn slope(times: &[f64], nodes: &[Vector], t: f64, side: Side) -> Vector {
    let i = segment(times, t, side);
    (&nodes[i + 1] - &nodes[i]) / (times[i + 1] - times[i])
}

/// Explicit error bounds for the mesh with `k` cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBudget {
    /// Step `h_k = T̄/k`.
    pub h: f64,
    /// Node bound `δ_k`.
    pub delta_k: f64,
    /// Bound `μ^x_k` on the interpolated state.
    pub mu_x_k: f64,
    /// Bound `μ^a_k` on `∫‖a − a^k‖²`.
    pub mu_a_k: f64,
    /// Bound `μ̃` on the variation of `u̇^k`.
    pub mu_tilde: f64,
}

/// Evaluates the error-budget formulas for given `L_f`, `T̄`, `μ` and `k`.
pub fn budget_from_constants(lf: f64, horizon: f64, mu: f64, k: usize) -> ErrorBudget {
    let kf = k as f64;
    let h = horizon / kf;
    let tail = horizon * 2f64.powi(-(k.min(2000) as i32));
    let e = (lf * horizon).exp();
    let base = h * mu + tail;
    let delta_k = e * (2.0 * lf + 1.0) * base;
    let mu_x_k = base * (2.0 * lf + 1.0) * (e * (1.0 + lf * h) + 1.0);
    let mu_a_k = 2.0 * horizon * mu * mu / kf + 2f64.powi(-(2 * k.min(1000) as i32) + 1) * horizon;
    let first = 3.0 * mu + 1.0 + 4.0 * lf * horizon * mu * e * (2.0 * lf + 1.0) + 2.0 * lf * mu;
    let second = 2.0 * e * (2.0 * lf + 1.0) * (mu + 1.0) + mu;
    ErrorBudget { h, delta_k, mu_x_k, mu_a_k, mu_tilde: first.max(second) }
}

/// Error budget for a reference and perturbation.
pub fn error_budget(reference: &ReferenceSolution, f: &PerturbationMap, k: usize) -> ErrorBudget {
    budget_from_constants(f.lipschitz(), reference.horizon(), reference.mu(), k)
}

/// Samples `a_j = a(t_j)` at left cell endpoints and returns the `μ^a_k` bound.
pub fn sample_control(reference: &ReferenceSolution, k: usize) -> (Vec<Vector>, f64) {
    let h = reference.horizon() / k as f64;
    let a = (0..k).map(|j| reference.a(j as f64 * h)).collect();
    let mu = reference.mu();
    let mu_a_k = 2.0 * reference.horizon() * mu * mu / k as f64 + 2f64.powi(-(2 * k.min(1000) as i32) + 1) * reference.horizon();
    (a, mu_a_k)
}

/// Nearest point of `F(x, u, a) = −cone{∇g_i(x − u)} − f(x, a)` to a target.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityProjection {
    /// The nearest element `v = −f − Σ λ_i ∇g_i`.
    pub v: Vector,
    /// Multipliers (zero off the active set).
    pub lambda: Vector,
    /// `dist(w; F(x, u, a))`.
    pub distance: f64,
}

/// Projects `w` onto `F(x, u, a)` by nonnegative least squares over active gradients.
pub fn project_velocity(
    set: &ConstraintSet,
    f: &PerturbationMap,
    x: &Vector,
    u: &Vector,
    a: &Vector,
    w: &Vector,
) -> Result<VelocityProjection, ApproximationError> {
    let y = x - u;
    let values = set.values(&y);
    let worst = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if worst < -ACTIVE_TOL {
        return Err(ApproximationError::NotInSet { violation: worst });
    }
    let fx = f.value(x, a);
    let active: Vec<usize> = (0..values.len()).filter(|&i| values[i] <= ACTIVE_TOL).collect();
    let mut lambda = Vector::zeros(set.len());
    let mut v = -&fx;
    if !active.is_empty() {
        let g = set.gradient_columns(&y, &active);
        let sol = nnls(&g, &(-(w + &fx)));
        v -= &g * &sol.x;
        for (pos, &i) in active.iter().enumerate() {
            lambda[i] = sol.x[pos];
        }
    }
    let distance = (&v - w).norm();
    Ok(VelocityProjection { v, lambda, distance })
}

/// Realized approximation errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealizedErrors {
    /// `max_j ‖x_j − x(t_j)‖`.
    pub sup_state: f64,
    /// `sup_t ‖x^k(t) − x(t)‖` for the piecewise-linear `x^k`.
    pub sup_extension: f64,
    /// `∫‖ẋ^k − ẋ‖²`.
    pub l2_velocity: f64,
    /// `∫‖a^k − a‖²`.
    pub l2_control: f64,
    /// `∫‖u̇^k − u̇‖²`.
    pub l2_shift_velocity: f64,
    /// `Σ ‖(u_{j+2} − u_{j+1})/h − (u_{j+1} − u_j)/h‖`.
    pub var_uk: f64,
    /// `‖(u_1 − u_0)/h‖`.
    pub first_quotient: f64,
    /// `‖(u_k − u_{k−1})/h‖`.
    pub last_quotient: f64,
    /// `‖x_k − x(T̄)‖`.
    pub endpoint: f64,
}

/// The discrete approximant of a reference on `k` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteApproximant {
    /// Mesh nodes.
    pub times: Vec<f64>,
    /// Step.
    pub h: f64,
    /// States `x_0..x_k`.
    pub x: Vec<Vector>,
    /// Shifts `u_0..u_k`.
    pub u: Vec<Vector>,
    /// Controls `a_0..a_{k−1}`.
    pub a: Vec<Vector>,
    /// Velocities `v_0..v_{k−1}`.
    pub v: Vec<Vector>,
    /// Multipliers of the velocity projections.
    pub lambda: Vec<Vector>,
    /// Realized errors.
    pub errors: RealizedErrors,
    /// Budget for this `k`.
    pub budget: ErrorBudget,
}

/// Builds the approximant `u_j = x_j − x(t_j) + u(t_j)`, `v_j = −Π(−ẋ(t_j); F(x_j, u_j, a_j))`,
/// `x_{j+1} = x_j + h v_j` and measures its errors.
pub fn construct_approximant(
    set: &ConstraintSet,
    f: &PerturbationMap,
    reference: &ReferenceSolution,
    k: usize,
) -> Result<DiscreteApproximant, ApproximationError> {
    if k == 0 {
        return Err(ApproximationError::EmptyMesh);
    }
    let horizon = reference.horizon();
    let h = horizon / k as f64;
    let times: Vec<f64> = (0..=k).map(|j| horizon * j as f64 / k as f64).collect();
    let (a, _) = sample_control(reference, k);
    let start = set.min_value(&(reference.x(0.0) - reference.u(0.0)));
    if start < -1e-9 {
        return Err(ApproximationError::NotInSet { violation: start });
    }
    let mut x = vec![reference.x(0.0)];
    let mut u = Vec::with_capacity(k + 1);
    let mut v = Vec::with_capacity(k);
    let mut lambda = Vec::with_capacity(k);
    for j in 0..k {
        let t = times[j];
        let xr = reference.x(t);
        let uj = &x[j] - &xr + reference.u(t);
        let target = -reference.x_dot(t);
        let proj = project_velocity(set, f, &x[j], &uj, &a[j], &target)?;
        let limit = f.lipschitz() * ((&x[j] - &xr).norm() + (&a[j] - reference.a(t)).norm()) + 1e-6;
        if proj.distance > limit {
            return Err(ApproximationError::VelocityProjectionFailure { step: j, distance: proj.distance, limit });
        }
        let vj = -proj.v;
        let next = &x[j] + &vj * h;
        u.push(uj);
        v.push(vj);
        lambda.push(proj.lambda);
        x.push(next);
    }
    u.push(&x[k] - reference.x(horizon) + reference.u(horizon));
    let budget = error_budget(reference, f, k);
    let errors = measure_errors(reference, &times, &x, &u, &a, &v);
    Ok(DiscreteApproximant { times, h, x, u, a, v, lambda, errors, budget })
}

fn measure_errors(reference: &ReferenceSolution, times: &[f64], x: &[Vector], u: &[Vector], a: &[Vector], v: &[Vector]) -> RealizedErrors {
    let k = v.len();
    let h = times[1] - times[0];
    let quad = Quadrature::gauss(4);
    let sub = 4;
    let mut sup_state = 0.0_f64;
    let mut sup_extension = 0.0_f64;
    let mut l2_velocity = 0.0;
    let mut l2_control = 0.0;
    let mut l2_shift_velocity = 0.0;
    for j in 0..=k {
        sup_state = sup_state.max((&x[j] - reference.x(times[j])).norm());
    }
    for j in 0..k {
        let (t0, t1) = (times[j], times[j + 1]);
        let du = (&u[j + 1] - &u[j]) / h;
        for s in 0..=16 {
            let t = t0 + (t1 - t0) * s as f64 / 16.0;
            let xk = &x[j] + &v[j] * (t - t0);
            sup_extension = sup_extension.max((xk - reference.x(t)).norm());
        }
        for s in 0..sub {
            let a0 = t0 + (t1 - t0) * s as f64 / sub as f64;
            let b0 = t0 + (t1 - t0) * (s + 1) as f64 / sub as f64;
            l2_velocity += quad.integrate(a0, b0, |t| (&v[j] - reference.x_dot(t)).norm_squared());
            l2_control += quad.integrate(a0, b0, |t| (&a[j] - reference.a(t)).norm_squared());
            l2_shift_velocity += quad.integrate(a0, b0, |t| (&du - reference.u_dot(t)).norm_squared());
        }
    }
    let (var_uk, first_quotient, last_quotient) = shift_quotients(u, h);
    let endpoint = (&x[k] - reference.x(times[k])).norm();
    RealizedErrors {
        sup_state,
        sup_extension,
        l2_velocity,
        l2_control,
        l2_shift_velocity,
        var_uk,
        first_quotient,
        last_quotient,
        endpoint,
    }
}

/// `(var(u̇^k), ‖Δu_0/h‖, ‖Δu_{k−1}/h‖)` for nodes `u_0..u_k`.
pub fn shift_quotients(u: &[Vector], h: f64) -> (f64, f64, f64) {
    let k = u.len() - 1;
    let mut var = 0.0;
    for j in 0..k.saturating_sub(1) {
        var += ((&u[j + 2] - &u[j + 1] * 2.0 + &u[j]) / h).norm();
    }
    let first = ((&u[1] - &u[0]) / h).norm();
    let last = ((&u[k] - &u[k - 1]) / h).norm();
    (var, first, last)
}

/// Outcome of [`verify_uk_variation`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationReport {
    /// `var(u̇^k)`.
    pub var_uk: f64,
    /// First difference quotient.
    pub first_quotient: f64,
    /// Last difference quotient.
    pub last_quotient: f64,
    /// The bound `μ̃`.
    pub mu_tilde: f64,
    /// Largest amount by which any of the three exceeds `μ̃` (zero when passing).
    pub excess: f64,
    /// True when all three are at most `μ̃`.
    pub passes: bool,
}

/// Checks the variation and endpoint-quotient bounds on `u^k`.
pub fn verify_uk_variation(approx: &DiscreteApproximant, budget: &ErrorBudget) -> VariationReport {
    let (var_uk, first_quotient, last_quotient) = shift_quotients(&approx.u, approx.h);
    let mu_tilde = budget.mu_tilde;
    let excess = [var_uk, first_quotient, last_quotient].iter().map(|q| (q - mu_tilde).max(0.0)).fold(0.0, f64::max);
    VariationReport { var_uk, first_quotient, last_quotient, mu_tilde, excess, passes: excess == 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::PerturbationMap;
    use crate::geometry::{GeometryConstants, SmoothConstraint};
    use crate::linalg::Matrix;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from_vec(x.to_vec())
    }

    fn corridor() -> ConstraintSet {
        let g = SmoothConstraint::affine(v(&[-1.0, 1.0]), -6.0);
        let k = GeometryConstants { m1: 1.0, m2: 2.0, m3: 0.0, beta: 1.0, rho: 1.0, c: 1e6 };
        ConstraintSet::new(vec![g], k).unwrap()
    }

    fn ramp_control_reference() -> ReferenceSolution {
        ReferenceSolution::from_fns(
            1,
            1,
            1.0,
            1.0,
            |_| v(&[5.0]),
            |_, _| v(&[0.0]),
            |_| v(&[0.0]),
            |_, _| v(&[0.0]),
            |t| v(&[t]),
        )
        .unwrap()
    }

    #[test]
    fn budget_formula_examples() {
        let b = budget_from_constants(0.0, 1.0, 1.0, 10);
        assert!((b.delta_k - (0.1 + 2f64.powi(-10))).abs() < 1e-15);
        assert!((b.delta_k - 0.10098).abs() < 1e-5);
        assert_eq!(b.mu_tilde, 5.0);
        // With L_f = 0 the extension bound doubles the node bound.
        assert!((b.mu_x_k - 2.0 * b.delta_k).abs() < 1e-15);
        let b1 = budget_from_constants(0.0, 1.0, 1.0, 1);
        assert_eq!(b1.mu_a_k, 2.5);
    }

    #[test]
    fn budget_is_nonincreasing_in_k() {
        let mut prev = budget_from_constants(0.7, 3.0, 2.0, 1);
        for k in 2..200 {
            let b = budget_from_constants(0.7, 3.0, 2.0, k);
            assert!(b.delta_k <= prev.delta_k && b.mu_x_k <= prev.mu_x_k);
            prev = b;
        }
    }

    #[test]
    fn sawtooth_control_error_matches_exact_integral() {
        let reference = ramp_control_reference();
        let (a, bound) = sample_control(&reference, 10);
        assert!((a[3][0] - 0.3).abs() < 1e-15);
        let quad = Quadrature::gauss(4);
        let h = 0.1;
        let realized: f64 = (0..10).map(|j| quad.integrate(j as f64 * h, (j + 1) as f64 * h, |t| (t - a[j][0]).powi(2))).sum();
        // k cells of ∫₀ʰ s² ds.
        assert!((realized - 10.0 * h.powi(3) / 3.0).abs() < 1e-15);
        assert!((realized - 1.0 / 300.0).abs() < 1e-15);
        assert!((bound - (0.2 + 2f64.powi(-19))).abs() < 1e-15);
        assert!(realized <= bound);
    }

    #[test]
    fn constant_control_has_zero_error() {
        let reference = ReferenceSolution::from_fns(1, 2, 2.0, 1.0, |_| v(&[0.0]), |_, _| v(&[0.0]), |_| v(&[0.0]), |_, _| v(&[0.0]), |_| v(&[1.0, -2.0])).unwrap();
        let (a, _) = sample_control(&reference, 7);
        assert!(a.iter().all(|x| *x == v(&[1.0, -2.0])));
    }

    #[test]
    fn velocity_projection_examples() {
        let set = corridor();
        let f = PerturbationMap::control_scaled(v(&[1.0, 0.5]), 1.0);
        let a = v(&[1.2, 0.4]);
        let fx = f.value(&Vector::zeros(2), &a);
        // Interior: the cone is trivial.
        let p = project_velocity(&set, &f, &v(&[0.0, 10.0]), &Vector::zeros(2), &a, &v(&[3.0, 3.0])).unwrap();
        assert_eq!(p.v, -&fx);
        // Boundary, w already in F with λ = 2.
        let grad = v(&[-1.0, 1.0]);
        let x = v(&[0.0, 6.0]);
        let w = -&fx - &grad * 2.0;
        let p = project_velocity(&set, &f, &x, &Vector::zeros(2), &a, &w).unwrap();
        assert!((&p.v - &w).norm() < 1e-12);
        assert!((p.lambda[0] - 2.0).abs() < 1e-12);
        // Unit multiple of the gradient.
        let w = -&fx - &grad;
        let p = project_velocity(&set, &f, &x, &Vector::zeros(2), &a, &w).unwrap();
        assert!(p.distance < 1e-12);
    }

    #[test]
    fn stationary_reference_is_reproduced_exactly() {
        let set = corridor();
        let f = PerturbationMap::zero(2, 1);
        let reference = ReferenceSolution::from_fns(
            2,
            1,
            3.0,
            1.0,
            |_| v(&[0.0, 10.0]),
            |_, _| v(&[0.0, 0.0]),
            |_| v(&[0.0, 0.0]),
            |_, _| v(&[0.0, 0.0]),
            |_| v(&[0.5]),
        )
        .unwrap();
        let approx = construct_approximant(&set, &f, &reference, 9).unwrap();
        assert_eq!(approx.errors.sup_state, 0.0);
        assert_eq!(approx.errors.l2_velocity, 0.0);
        assert!(approx.u.iter().all(|u| u.norm() == 0.0));
        assert!(verify_uk_variation(&approx, &approx.budget).passes);
    }

    #[test]
    fn zigzag_shift_fails_variation_check() {
        let budget = budget_from_constants(0.0, 1.0, 1.0, 10);
        let jump = 3.0 * budget.mu_tilde * 0.1;
        let u: Vec<Vector> = (0..=10).map(|j| v(&[if j % 2 == 0 { 0.0 } else { jump }])).collect();
        let approx = DiscreteApproximant {
            times: (0..=10).map(|j| j as f64 * 0.1).collect(),
            h: 0.1,
            x: u.clone(),
            u,
            a: vec![v(&[0.0]); 10],
            v: vec![v(&[0.0]); 10],
            lambda: vec![v(&[0.0]); 10],
            errors: RealizedErrors {
                sup_state: 0.0,
                sup_extension: 0.0,
                l2_velocity: 0.0,
                l2_control: 0.0,
                l2_shift_velocity: 0.0,
                var_uk: 0.0,
                first_quotient: 0.0,
                last_quotient: 0.0,
                endpoint: 0.0,
            },
            budget,
        };
        let r = verify_uk_variation(&approx, &budget);
        assert!(!r.passes);
        assert!((r.first_quotient - 3.0 * budget.mu_tilde).abs() < 1e-9);
        assert!(r.excess > 0.0);
    }

    #[test]
    fn one_sided_slopes_of_piecewise_linear_reference() {
        let reference = ReferenceSolution::piecewise_linear(
            vec![0.0, 1.0, 2.0],
            vec![v(&[0.0]), v(&[1.0]), v(&[3.0])],
            vec![v(&[0.0]), v(&[0.0]), v(&[0.0])],
            vec![v(&[1.0]), v(&[2.0])],
            1.0,
        )
        .unwrap();
        assert_eq!(reference.x_dot_side(1.0, Side::Left), v(&[1.0]));
        assert_eq!(reference.x_dot_side(1.0, Side::Right), v(&[2.0]));
        assert_eq!(reference.x_dot_side(2.0, Side::Left), v(&[2.0]));
        assert_eq!(reference.x_dot_side(2.0, Side::Right), v(&[0.0]));
        assert_eq!(reference.x(2.5), v(&[3.0]));
        assert_eq!(reference.a(1.0), v(&[2.0]));
        assert_eq!(reference.x(1.5), v(&[2.0]));
    }

    fn circling_reference(radius: f64, omega: f64, horizon: f64) -> ReferenceSolution {
        // x(t) on a circle of the given radius, staying outside the unit disk; u ≡ 0.
        ReferenceSolution::from_fns(
            2,
            2,
            horizon,
            omega * omega * radius * horizon + omega,
            move |t| v(&[radius * (omega * t).cos(), radius * (omega * t).sin()]),
            move |t, _| v(&[-radius * omega * (omega * t).sin(), radius * omega * (omega * t).cos()]),
            |_| Vector::zeros(2),
            |_, _| Vector::zeros(2),
            move |t| v(&[-radius * omega * (omega * t).sin(), radius * omega * (omega * t).cos()]),
        )
        .unwrap()
    }

    fn disk_complement() -> ConstraintSet {
        let g = SmoothConstraint::quadratic(Matrix::identity(2, 2), Vector::zeros(2), -1.0);
        let k = GeometryConstants { m1: 1.0, m2: 4.0, m3: 2.0, beta: 1.0, rho: 0.5, c: 0.5 };
        ConstraintSet::new(vec![g], k).unwrap()
    }

    #[test]
    fn smooth_reference_converges_within_budget() {
        let set = disk_complement();
        let f = PerturbationMap::control_scaled(v(&[1.0, 1.0]), 2.0);
        let reference = circling_reference(2.0, 0.5, 2.0);
        let mut prev: Option<RealizedErrors> = None;
        for k in [50, 100, 200, 400, 800] {
            let approx = construct_approximant(&set, &f, &reference, k).unwrap();
            let e = approx.errors;
            assert!(e.sup_state <= approx.budget.delta_k);
            assert!(e.sup_extension <= approx.budget.mu_x_k);
            assert!(e.endpoint <= approx.budget.mu_x_k);
            if let Some(p) = prev {
                assert!(e.l2_velocity <= 1.1 * p.l2_velocity + 1e-14);
                assert!(e.l2_control <= 1.1 * p.l2_control + 1e-14);
            }
            prev = Some(e);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn shift_and_state_errors_are_coupled(radius in 1.5..3.0f64, omega in 0.1..1.0f64, k in 5usize..60) {
            let set = disk_complement();
            let f = PerturbationMap::control_scaled(v(&[1.0, 1.0]), 2.0);
            let reference = circling_reference(radius, omega, 1.5);
            let approx = construct_approximant(&set, &f, &reference, k).unwrap();
            for j in 0..=k {
                let t = approx.times[j];
                let du = &approx.u[j] - reference.u(t);
                let dx = &approx.x[j] - reference.x(t);
                prop_assert!((du - dx).norm() <= 4.0 * f64::EPSILON * (1.0 + approx.x[j].norm()));
            }
        }
    }
}
