//! Moving constraint sets `C + u` with `C = ∩{g_i ≥ 0}`, their projections,
//! active sets, normal-cone multipliers and the standing-assumption checks.
//!
//! Sign conventions: the normal cone of `C` at a boundary point `y` is
//! `N_C(y) = −cone{∇g_i(y) : i active}`. A projection `y = Π(z; C + u)`
//! therefore satisfies `y − z = Σ λ_i ∇g_i(y − u)` with `λ ≥ 0`.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{least_squares, nnls, Matrix, Vector};

type ScalarFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;
type GradientFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
type HessianFn = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;

/// Errors raised by geometric operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("constraint set must contain at least one constraint")]
    Empty,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("constant `{name}` must be positive and finite, got {value}")]
    InvalidConstant { name: &'static str, value: f64 },
    #[error("projection did not converge after {iterations} iterations (KKT residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("projection distance {distance:.6e} is outside the admissible tube of radius {limit:.6e}")]
    OutsideTube { distance: f64, limit: f64 },
    #[error("point is not in the set: most violated constraint value {violation:.3e}")]
    NotInSet { violation: f64 },
    #[error("vector is not in the cone of active gradients (residual {residual:.3e})")]
    Infeasible { residual: f64 },
}

/// A convex `C²` function with value, gradient and Hessian evaluators.
#[derive(Clone)]
pub struct SmoothConstraint {
    dim: usize,
    value: ScalarFn,
    gradient: GradientFn,
    hessian: HessianFn,
    flat: bool,
    label: String,
}

impl fmt::Debug for SmoothConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothConstraint").field("dim", &self.dim).field("label", &self.label).finish()
    }
}

impl SmoothConstraint {
    /// Wraps user-supplied evaluators.
    pub fn new<V, G, H>(dim: usize, label: impl Into<String>, value: V, gradient: G, hessian: H) -> Self
    where
        V: Fn(&Vector) -> f64 + Send + Sync + 'static,
        G: Fn(&Vector) -> Vector + Send + Sync + 'static,
        H: Fn(&Vector) -> Matrix + Send + Sync + 'static,
    {
        Self {
            dim,
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            hessian: Arc::new(hessian),
            flat: false,
            label: label.into(),
        }
    }

    /// `a·x + b`.
    pub fn affine(a: Vector, b: f64) -> Self {
        let dim = a.len();
        let a1 = a.clone();
        let a2 = a.clone();
        let mut c = Self::new(
            dim,
            "affine",
            move |x| a1.dot(x) + b,
            move |_| a2.clone(),
            move |_| Matrix::zeros(dim, dim),
        );
        c.flat = true;
        c
    }

    /// `‖P x − q‖ − r`. At `P x = q` the gradient and Hessian are reported as zero.
    pub fn sphere_gap(p: Matrix, q: Vector, r: f64) -> Self {
        let dim = p.ncols();
        let (p1, q1) = (p.clone(), q.clone());
        let (p2, q2) = (p.clone(), q.clone());
        let (p3, q3) = (p, q);
        Self::new(
            dim,
            "sphere_gap",
            move |x| (&p1 * x - &q1).norm() - r,
            move |x| {
                let d = &p2 * x - &q2;
                let nrm = d.norm();
                if nrm == 0.0 {
                    Vector::zeros(x.len())
                } else {
                    p2.transpose() * d / nrm
                }
            },
            move |x| {
                let d = &p3 * x - &q3;
                let nrm = d.norm();
                if nrm == 0.0 {
                    return Matrix::zeros(x.len(), x.len());
                }
                let e = &d / nrm;
                let proj = Matrix::identity(d.len(), d.len()) - &e * e.transpose();
                p3.transpose() * proj * &p3 / nrm
            },
        )
    }

    /// `xᵀ Q x + a·x + b`.
    pub fn quadratic(q: Matrix, a: Vector, b: f64) -> Self {
        let dim = a.len();
        let sym = &q + q.transpose();
        let (q1, a1) = (q, a.clone());
        let (s2, a2) = (sym.clone(), a);
        let s3 = sym;
        Self::new(
            dim,
            "quadratic",
            move |x| x.dot(&(&q1 * x)) + a1.dot(x) + b,
            move |x| &s2 * x + &a2,
            move |_| s3.clone(),
        )
    }

    /// Replaces the descriptive label.
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Ambient dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Descriptive label.
    pub fn label(&self) -> &str {
        &self.label
    }

    /// True when the Hessian is identically zero by construction.
    pub fn is_affine(&self) -> bool {
        self.flat
    }

    /// Function value.
    pub fn value(&self, x: &Vector) -> f64 {
        (self.value)(x)
    }

    /// Gradient.
    pub fn gradient(&self, x: &Vector) -> Vector {
        (self.gradient)(x)
    }

    /// Hessian, symmetrized as `(H + Hᵀ)/2`.
    pub fn hessian(&self, x: &Vector) -> Matrix {
        let h = (self.hessian)(x);
        (&h + h.transpose()) * 0.5
    }

    /// Relative mismatch of the gradient and Hessian against central differences at `x`.
    pub fn derivative_mismatch(&self, x: &Vector) -> (f64, f64) {
        let n = x.len();
        let g = self.gradient(x);
        let h = self.hessian(x);
        let mut g_fd = Vector::zeros(n);
        let mut h_fd = Matrix::zeros(n, n);
        for i in 0..n {
            let step = 1e-6 * (1.0 + x[i].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += step;
            xm[i] -= step;
            g_fd[i] = (self.value(&xp) - self.value(&xm)) / (2.0 * step);
            let col = (self.gradient(&xp) - self.gradient(&xm)) / (2.0 * step);
            h_fd.set_column(i, &col);
        }
        let g_err = (&g - &g_fd).norm() / (1.0 + g.norm());
        let h_err = (&h - &h_fd).norm() / (1.0 + h.norm());
        (g_err, h_err)
    }
}

/// Constants of the standing assumptions on the constraint functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryConstants {
    /// Lower gradient bound `M_1`.
    pub m1: f64,
    /// Upper gradient bound `M_2`.
    pub m2: f64,
    /// Hessian bound `M_3`; zero (or below machine epsilon) marks a flat set.
    pub m3: f64,
    /// Positive-linear-independence constant `β`.
    pub beta: f64,
    /// Activity radius `ρ` for the perturbed index set.
    pub rho: f64,
    /// Radius `c` of the tube around `C` where the bounds hold.
    pub c: f64,
}

/// The set `C = ∩{x : g_i(x) ≥ 0}` together with its constants.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    constraints: Vec<SmoothConstraint>,
    constants: GeometryConstants,
    dim: usize,
}

/// Report produced by [`active_indices`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSetReport {
    /// Indices with `|g_i(y)| ≤ tol`.
    pub active: Vec<usize>,
    /// Indices with `g_i(y) ≤ ρ`.
    pub rho_active: Vec<usize>,
    /// All constraint values.
    pub values: Vec<f64>,
}

/// Report of the sampled standing-assumption audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    /// Smallest gradient norm seen at sampled points.
    pub min_gradient: f64,
    /// Largest gradient norm seen.
    pub max_gradient: f64,
    /// Largest Hessian spectral norm seen.
    pub max_hessian: f64,
    /// Largest relative derivative mismatch against finite differences.
    pub max_derivative_error: f64,
    /// True when all sampled values respect `M_1`, `M_2`, `M_3`.
    pub holds: bool,
}

impl ConstraintSet {
    /// Validates and builds a constraint set.
    pub fn new(constraints: Vec<SmoothConstraint>, constants: GeometryConstants) -> Result<Self, GeometryError> {
        let first = constraints.first().ok_or(GeometryError::Empty)?;
        let dim = first.dim();
        for c in &constraints {
            if c.dim() != dim {
                return Err(GeometryError::DimensionMismatch { expected: dim, found: c.dim() });
            }
        }
        let positive = [
            ("m1", constants.m1),
            ("m2", constants.m2),
            ("beta", constants.beta),
            ("rho", constants.rho),
            ("c", constants.c),
        ];
        for (name, value) in positive {
            if !(value.is_finite() || value == f64::INFINITY) || value <= 0.0 || value.is_nan() {
                return Err(GeometryError::InvalidConstant { name, value });
            }
        }
        if !(constants.m3 >= 0.0 && constants.m3.is_finite()) {
            return Err(GeometryError::InvalidConstant { name: "m3", value: constants.m3 });
        }
        Ok(Self { constraints, constants, dim })
    }

    /// Ambient dimension `n`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of constraints `m`.
    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    /// Always false; a constraint set holds at least one constraint.
    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// The constraint functions.
    pub fn constraints(&self) -> &[SmoothConstraint] {
        &self.constraints
    }

    /// The standing-assumption constants.
    pub fn constants(&self) -> &GeometryConstants {
        &self.constants
    }

    /// True when every constraint is affine.
    pub fn is_polyhedral(&self) -> bool {
        self.constraints.iter().all(SmoothConstraint::is_affine)
    }

    /// All values `g_i(y)`.
    pub fn values(&self, y: &Vector) -> Vec<f64> {
        self.constraints.iter().map(|c| c.value(y)).collect()
    }

    /// Gradients of the listed constraints as the columns of an `n × |idx|` matrix.
    pub fn gradient_columns(&self, y: &Vector, idx: &[usize]) -> Matrix {
        let mut g = Matrix::zeros(self.dim, idx.len());
        for (col, &i) in idx.iter().enumerate() {
            g.set_column(col, &self.constraints[i].gradient(y));
        }
        g
    }

    /// Smallest constraint value at `y`.
    pub fn min_value(&self, y: &Vector) -> f64 {
        self.values(y).into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Membership in `C` up to `tol`.
    pub fn contains(&self, y: &Vector, tol: f64) -> bool {
        self.min_value(y) >= -tol
    }

    /// Audits the gradient and Hessian bounds at the given points.
    pub fn check_standing_assumptions(&self, points: &[Vector]) -> AssumptionReport {
        let mut min_g = f64::INFINITY;
        let mut max_g: f64 = 0.0;
        let mut max_h: f64 = 0.0;
        let mut max_err: f64 = 0.0;
        for y in points {
            for c in &self.constraints {
                let g = c.gradient(y).norm();
                min_g = min_g.min(g);
                max_g = max_g.max(g);
                let h = c.hessian(y);
                max_h = max_h.max(h.clone().svd(false, false).singular_values.max());
                let (ge, he) = c.derivative_mismatch(y);
                max_err = max_err.max(ge).max(he);
            }
        }
        let k = &self.constants;
        let slack = 1e-9;
        let holds = min_g >= k.m1 * (1.0 - slack) && max_g <= k.m2 * (1.0 + slack) && max_h <= k.m3 * (1.0 + slack) + slack;
        AssumptionReport { min_gradient: min_g, max_gradient: max_g, max_hessian: max_h, max_derivative_error: max_err, holds }
    }
}

/// Index sets of active and `ρ`-active constraints at `y`.
pub fn active_indices(set: &ConstraintSet, y: &Vector, tol: f64) -> ActiveSetReport {
    let values = set.values(y);
    let rho = set.constants.rho;
    let active = (0..values.len()).filter(|&i| values[i].abs() <= tol).collect();
    let rho_active = (0..values.len()).filter(|&i| values[i] <= rho).collect();
    ActiveSetReport { active, rho_active, values }
}

/// Family of smooth inequality constraints `h_i(w) ≥ 0` usable by the projector.
pub(crate) trait InequalityFamily {
    fn count(&self) -> usize;
    fn value(&self, i: usize, w: &Vector) -> f64;
    fn gradient(&self, i: usize, w: &Vector) -> Vector;
    fn hessian(&self, i: usize, w: &Vector) -> Matrix;
}

impl InequalityFamily for ConstraintSet {
    fn count(&self) -> usize {
        self.len()
    }
    fn value(&self, i: usize, w: &Vector) -> f64 {
        self.constraints[i].value(w)
    }
    fn gradient(&self, i: usize, w: &Vector) -> Vector {
        self.constraints[i].gradient(w)
    }
    fn hessian(&self, i: usize, w: &Vector) -> Matrix {
        self.constraints[i].hessian(w)
    }
}

/// Output of [`project`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// The projected point `y ∈ C + u`.
    pub point: Vector,
    /// Multipliers with `y − z = Σ λ_i ∇g_i(y − u)`; zero for inactive constraints.
    pub multipliers: Vector,
    /// `‖y − z‖`.
    pub distance: f64,
}

/// Tuning knobs for the projector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionOptions {
    /// Outer active-set iterations.
    pub max_outer: usize,
    /// Newton iterations per working set.
    pub max_newton: usize,
    /// Gradient iterations of the fallback.
    pub fallback_iters: usize,
    /// Whether to reject results farther than `min(c, η)` from `z`.
    pub enforce_tube: bool,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self { max_outer: 50, max_newton: 100, fallback_iters: 5000, enforce_tube: true }
    }
}

/// Projects `z` onto `C + shift` with default options.
pub fn project(set: &ConstraintSet, z: &Vector, shift: &Vector) -> Result<Projection, GeometryError> {
    project_with(set, z, shift, ProjectionOptions::default())
}

/// Projects `z` onto `C + shift`.
pub fn project_with(
    set: &ConstraintSet,
    z: &Vector,
    shift: &Vector,
    opts: ProjectionOptions,
) -> Result<Projection, GeometryError> {
    if z.len() != set.dim() {
        return Err(GeometryError::DimensionMismatch { expected: set.dim(), found: z.len() });
    }
    if shift.len() != set.dim() {
        return Err(GeometryError::DimensionMismatch { expected: set.dim(), found: shift.len() });
    }
    let target = z - shift;
    let (w, lambda) = project_family(set, &target, opts)?;
    let point = w + shift;
    let distance = (&point - z).norm();
    if opts.enforce_tube {
        let limit = set.constants.c.min(prox_modulus(set, None));
        if distance >= limit {
            return Err(GeometryError::OutsideTube { distance, limit });
        }
    }
    Ok(Projection { point, multipliers: lambda, distance })
}

/// Core active-set projector on `{w : h_i(w) ≥ 0}` returning `(w, λ)` with `w − p = Σ λ_i ∇h_i(w)`.
pub(crate) fn project_family<F: InequalityFamily>(
    fam: &F,
    p: &Vector,
    opts: ProjectionOptions,
) -> Result<(Vector, Vector), GeometryError> {
    let m = fam.count();
    let values: Vec<f64> = (0..m).map(|i| fam.value(i, p)).collect();
    if values.iter().all(|v| *v >= 0.0) {
        return Ok((p.clone(), Vector::zeros(m)));
    }
    let scale = 1.0 + p.norm();
    let trial = 1e-6 * scale;
    let feas_tol = 1e-12 * scale;

    let mut working: Vec<usize> = (0..m).filter(|&i| values[i] <= trial).collect();
    let mut w = p.clone();
    let mut last_residual = f64::INFINITY;

    for _ in 0..opts.max_outer {
        let mu0 = initial_multipliers(fam, &working, &w, p);
        let mu = match newton_on_working_set(fam, &working, p, w.clone(), mu0, opts.max_newton, scale) {
            Some((w_new, mu_new, res)) => {
                w = w_new;
                last_residual = res;
                mu_new
            }
            None => {
                last_residual = f64::INFINITY;
                break;
            }
        };
        let most_negative = (0..working.len())
            .filter(|&pos| mu[pos] < -1e-12 * scale)
            .min_by(|&a, &b| mu[a].partial_cmp(&mu[b]).unwrap_or(std::cmp::Ordering::Equal));
        if let Some(pos) = most_negative {
            working.remove(pos);
            continue;
        }
        let violated = (0..m)
            .filter(|i| !working.contains(i))
            .map(|i| (i, fam.value(i, &w)))
            .filter(|(_, v)| *v < -feas_tol)
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        if let Some((i, _)) = violated {
            working.push(i);
            continue;
        }
        let lambda = scatter(&working, &mu, m);
        if kkt_residual(fam, p, &w, &lambda) <= 1e-10 * scale {
            return Ok((w, lambda));
        }
        break;
    }

    // Fallback: quadratic-penalty gradient descent followed by a Newton polish.
    let w0 = penalty_descent(fam, p, opts.fallback_iters);
    let near: Vec<usize> = (0..m).filter(|&i| fam.value(i, &w0) <= 1e-4 * scale).collect();
    let mu0 = initial_multipliers(fam, &near, &w0, p);
    if let Some((w1, mu1, res)) = newton_on_working_set(fam, &near, p, w0, mu0, opts.max_newton, scale) {
        let lambda = scatter(&near, &mu1, m);
        let feasible = (0..m).all(|i| fam.value(i, &w1) >= -feas_tol);
        if feasible && mu1.iter().all(|v| *v >= -1e-12 * scale) && kkt_residual(fam, p, &w1, &lambda) <= 1e-10 * scale {
            let lambda = lambda.map(|v| v.max(0.0));
            return Ok((w1, lambda));
        }
        last_residual = res;
    }
    Err(GeometryError::NoConvergence { iterations: opts.max_outer, residual: last_residual })
}

fn scatter(idx: &[usize], values: &Vector, m: usize) -> Vector {
    let mut out = Vector::zeros(m);
    for (pos, &i) in idx.iter().enumerate() {
        out[i] = values[pos];
    }
    out
}

fn initial_multipliers<F: InequalityFamily>(fam: &F, working: &[usize], w: &Vector, p: &Vector) -> Vector {
    if working.is_empty() {
        return Vector::zeros(0);
    }
    let mut g = Matrix::zeros(w.len(), working.len());
    for (col, &i) in working.iter().enumerate() {
        g.set_column(col, &fam.gradient(i, w));
    }
    least_squares(&g, &(w - p))
}

fn kkt_residual<F: InequalityFamily>(fam: &F, p: &Vector, w: &Vector, lambda: &Vector) -> f64 {
    let mut r = w - p;
    for i in 0..fam.count() {
        if lambda[i] != 0.0 {
            r -= fam.gradient(i, w) * lambda[i];
        }
    }
    r.norm()
}

fn stationarity_system<F: InequalityFamily>(fam: &F, working: &[usize], p: &Vector, w: &Vector, mu: &Vector) -> Vector {
    let n = w.len();
    let q = working.len();
    let mut r = Vector::zeros(n + q);
    let mut top = w - p;
    for (pos, &i) in working.iter().enumerate() {
        top -= fam.gradient(i, w) * mu[pos];
        r[n + pos] = fam.value(i, w);
    }
    r.rows_mut(0, n).copy_from(&top);
    r
}

fn newton_on_working_set<F: InequalityFamily>(
    fam: &F,
    working: &[usize],
    p: &Vector,
    mut w: Vector,
    mut mu: Vector,
    max_iter: usize,
    scale: f64,
) -> Option<(Vector, Vector, f64)> {
    let n = w.len();
    let q = working.len();
    let tol = 1e-13 * scale;
    let mut r = stationarity_system(fam, working, p, &w, &mu);
    let mut rn = r.norm();
    for _ in 0..max_iter {
        if rn <= tol {
            return Some((w, mu, rn));
        }
        let mut jac = Matrix::zeros(n + q, n + q);
        let mut top_left = Matrix::identity(n, n);
        for (pos, &i) in working.iter().enumerate() {
            if mu[pos] != 0.0 {
                top_left -= fam.hessian(i, &w) * mu[pos];
            }
            let g = fam.gradient(i, &w);
            for row in 0..n {
                jac[(row, n + pos)] = -g[row];
                jac[(n + pos, row)] = g[row];
            }
        }
        jac.view_mut((0, 0), (n, n)).copy_from(&top_left);
        let step = match jac.clone().lu().solve(&(-&r)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => least_squares(&jac, &(-&r)),
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let w_try = &w + step.rows(0, n) * t;
            let mu_try = &mu + step.rows(n, q) * t;
            let r_try = stationarity_system(fam, working, p, &w_try, &mu_try);
            let rn_try = r_try.norm();
            if rn_try <= (1.0 - 1e-4 * t) * rn || rn_try <= tol {
                w = w_try;
                mu = mu_try;
                r = r_try;
                rn = rn_try;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return if rn <= 1e-10 * scale { Some((w, mu, rn)) } else { None };
        }
    }
    if rn <= 1e-10 * scale {
        Some((w, mu, rn))
    } else {
        None
    }
}

fn penalty_descent<F: InequalityFamily>(fam: &F, p: &Vector, iters: usize) -> Vector {
    let mut w = p.clone();
    let stages = [1e2, 1e4, 1e6, 1e8];
    let per_stage = (iters / stages.len()).max(1);
    for &rho in &stages {
        let mut step = 1.0 / (1.0 + rho);
        let objective = |x: &Vector| {
            let mut v = 0.5 * (x - p).norm_squared();
            for i in 0..fam.count() {
                let g = fam.value(i, x).min(0.0);
                v += 0.5 * rho * g * g;
            }
            v
        };
        for _ in 0..per_stage {
            let mut grad = &w - p;
            for i in 0..fam.count() {
                let g = fam.value(i, &w);
                if g < 0.0 {
                    grad += fam.gradient(i, &w) * (rho * g);
                }
            }
            if grad.norm() < 1e-14 {
                break;
            }
            let f0 = objective(&w);
            let mut moved = false;
            for _ in 0..60 {
                let cand = &w - &grad * step;
                if objective(&cand) <= f0 - 0.5 * step * grad.norm_squared() {
                    w = cand;
                    step *= 1.5;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
    }
    w
}

/// Decomposes `v` as `Σ λ_i ∇g_i(y)` over active constraints with `λ ≥ 0`.
pub fn normal_cone_decompose(set: &ConstraintSet, y: &Vector, v: &Vector, tol: f64) -> Result<Vector, GeometryError> {
    let values = set.values(y);
    let worst = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if worst < -tol {
        return Err(GeometryError::NotInSet { violation: worst });
    }
    let active: Vec<usize> = (0..values.len()).filter(|&i| values[i].abs() <= tol).collect();
    let threshold = 1e-8_f64.max(1e-8 * v.norm());
    let m = set.len();
    if active.is_empty() {
        let residual = v.norm();
        return if residual <= threshold { Ok(Vector::zeros(m)) } else { Err(GeometryError::Infeasible { residual }) };
    }
    let g = set.gradient_columns(y, &active);
    let sol = nnls(&g, v);
    if sol.residual > threshold {
        return Err(GeometryError::Infeasible { residual: sol.residual });
    }
    Ok(scatter(&active, &sol.x, m))
}

/// Certificate for positive linear independence of active gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlicqCertificate {
    /// True when the certificate exceeds `1e-8`.
    pub holds: bool,
    /// `min ‖Σ λ_i ∇g_i(y)‖` over the unit simplex on the active set; `+∞` when nothing is active.
    pub certificate: f64,
}

/// Checks positive linear independence of the active gradients at `y`.
pub fn plicq_check(set: &ConstraintSet, y: &Vector) -> PlicqCertificate {
    plicq_check_with_tol(set, y, 1e-8)
}

/// As [`plicq_check`] with an explicit activity tolerance.
pub fn plicq_check_with_tol(set: &ConstraintSet, y: &Vector, tol: f64) -> PlicqCertificate {
    let report = active_indices(set, y, tol);
    if report.active.is_empty() {
        return PlicqCertificate { holds: true, certificate: f64::INFINITY };
    }
    let g = set.gradient_columns(y, &report.active);
    let certificate = simplex_min_norm(&g);
    PlicqCertificate { holds: certificate > 1e-8, certificate }
}

/// `min ‖G λ‖` over the unit simplex, by exhaustive enumeration of supports.
pub(crate) fn simplex_min_norm(g: &Matrix) -> f64 {
    let q = g.ncols();
    assert!(q <= 20, "simplex enumeration limited to 20 active constraints");
    let mut best = f64::INFINITY;
    for mask in 1u32..(1u32 << q) {
        let idx: Vec<usize> = (0..q).filter(|&i| mask & (1 << i) != 0).collect();
        let s = idx.len();
        let sub = g.select_columns(&idx);
        let gram = sub.transpose() * &sub;
        let mut kkt = Matrix::zeros(s + 1, s + 1);
        kkt.view_mut((0, 0), (s, s)).copy_from(&(gram * 2.0));
        for i in 0..s {
            kkt[(i, s)] = 1.0;
            kkt[(s, i)] = 1.0;
        }
        let mut rhs = Vector::zeros(s + 1);
        rhs[s] = 1.0;
        let sol = least_squares(&kkt, &rhs);
        if (&kkt * &sol - &rhs).norm() > 1e-9 {
            continue;
        }
        let lam = sol.rows(0, s).into_owned();
        if lam.iter().any(|v| *v < -1e-12) {
            continue;
        }
        best = best.min((&sub * lam).norm());
    }
    best
}

/// Prox-regularity modulus `η = a / (M_3 β)` with `a = alpha_override` or `M_1`.
///
/// Flat sets (`M_3` below machine epsilon) report `+∞`.
pub fn prox_modulus(set: &ConstraintSet, alpha_override: Option<f64>) -> f64 {
    let k = set.constants();
    let a = alpha_override.unwrap_or(k.m1);
    if k.m3 < f64::EPSILON {
        return f64::INFINITY;
    }
    a / (k.m3 * k.beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constants() -> GeometryConstants {
        GeometryConstants { m1: 1.0, m2: 10.0, m3: 0.0, beta: 1.0, rho: 1.0, c: 1e6 }
    }

    fn corridor4() -> ConstraintSet {
        let g = SmoothConstraint::affine(Vector::from_vec(vec![-1.0, 0.0, 1.0, 0.0]), -6.0);
        ConstraintSet::new(vec![g], GeometryConstants { m1: 2f64.sqrt(), m2: 2f64.sqrt(), ..constants() }).unwrap()
    }

    fn disk_complement() -> ConstraintSet {
        let g = SmoothConstraint::quadratic(Matrix::identity(2, 2), Vector::zeros(2), -1.0);
        ConstraintSet::new(vec![g], GeometryConstants { m1: 2.0, m2: 4.0, m3: 2.0, beta: 1.0, rho: 1.0, c: 0.5 }).unwrap()
    }

    fn v(x: &[f64]) -> Vector {
        Vector::from_vec(x.to_vec())
    }

    #[test]
    fn corridor_start_is_inactive() {
        let set = corridor4();
        let r = active_indices(&set, &v(&[-48.0, 0.0, -24.0, 0.0]), 1e-8);
        assert!(r.active.is_empty());
        assert_eq!(r.values, vec![18.0]);
    }

    #[test]
    fn zero_value_is_active() {
        let set = corridor4();
        let r = active_indices(&set, &v(&[0.0, 0.0, 6.0, 0.0]), 0.0);
        assert_eq!(r.active, vec![0]);
    }

    #[test]
    fn sphere_gap_boundary_is_active() {
        // g(x) = ‖x₂ − x₁‖ − 6 in the stacked coordinates (x₁, x₂) ∈ R² × R².
        let p = Matrix::from_row_slice(2, 4, &[-1.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 1.0]);
        let g = SmoothConstraint::sphere_gap(p, Vector::zeros(2), 6.0);
        let set = ConstraintSet::new(vec![g], GeometryConstants { m3: 1.0, ..constants() }).unwrap();
        let r = active_indices(&set, &v(&[0.0, 0.0, 6.0, 0.0]), 1e-8);
        assert_eq!(r.active, vec![0]);
    }

    #[test]
    fn half_space_projection_matches_closed_form() {
        let set = corridor4();
        let z = v(&[0.0, 0.0, 2.0, 0.0]);
        let p = project(&set, &z, &Vector::zeros(4)).unwrap();
        // Closed form for a half-space {a·x + b ≥ 0}: y = z + max(0, −(a·z + b))/‖a‖² · a.
        let a = v(&[-1.0, 0.0, 1.0, 0.0]);
        let shortfall = -(a.dot(&z) - 6.0);
        let expected = &z + &a * (shortfall / a.norm_squared());
        assert!((&p.point - &expected).norm() < 1e-12);
        assert!((&p.point - v(&[-2.0, 0.0, 4.0, 0.0])).norm() < 1e-12);
        let recon = &a * p.multipliers[0];
        assert!((&p.point - &z - recon).norm() < 1e-9);
        assert!(p.multipliers[0] > 0.0);
    }

    #[test]
    fn interior_point_is_fixed() {
        let set = corridor4();
        let z = v(&[-10.0, 0.0, 10.0, 0.0]);
        let p = project(&set, &z, &Vector::zeros(4)).unwrap();
        assert_eq!(p.point, z);
        assert_eq!(p.multipliers[0], 0.0);
    }

    #[test]
    fn disk_complement_projects_radially() {
        let set = disk_complement();
        let p = project(&set, &v(&[0.8, 0.0]), &Vector::zeros(2)).unwrap();
        assert!((&p.point - v(&[1.0, 0.0])).norm() < 1e-10);
        // y − z = λ ∇g(y) = λ (2, 0) with y − z = (0.2, 0).
        assert!((p.multipliers[0] - 0.1).abs() < 1e-10);
    }

    #[test]
    fn projection_respects_shift() {
        let set = corridor4();
        let u = v(&[1.0, 0.0, 1.0, 0.0]);
        let z = v(&[1.0, 0.0, 3.0, 0.0]);
        let p = project(&set, &z, &u).unwrap();
        assert!((&p.point - v(&[-1.0, 0.0, 5.0, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn tube_violation_is_reported_distinctly() {
        let set = disk_complement();
        let err = project(&set, &v(&[0.0, 0.05]), &Vector::zeros(2)).unwrap_err();
        assert!(matches!(err, GeometryError::OutsideTube { .. }));
    }

    #[test]
    fn two_half_spaces_corner() {
        let g1 = SmoothConstraint::affine(v(&[1.0, 0.0]), 0.0);
        let g2 = SmoothConstraint::affine(v(&[0.0, 1.0]), 0.0);
        let set = ConstraintSet::new(vec![g1, g2], constants()).unwrap();
        let p = project(&set, &v(&[-1.0, -2.0]), &Vector::zeros(2)).unwrap();
        assert!(p.point.norm() < 1e-12);
        assert!((p.multipliers[0] - 1.0).abs() < 1e-12);
        assert!((p.multipliers[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn decompose_single_constraint() {
        let set = corridor4();
        let y = v(&[0.0, 0.0, 6.0, 0.0]);
        let vv = v(&[-0.6, 0.0, 0.6, 0.0]);
        let lam = normal_cone_decompose(&set, &y, &vv, 1e-8).unwrap();
        let grad = v(&[-1.0, 0.0, 1.0, 0.0]);
        assert!((lam[0] - vv.dot(&grad) / grad.norm_squared()).abs() < 1e-12);
        assert!((lam[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn decompose_zero_and_empty_cone() {
        let set = corridor4();
        let y = v(&[0.0, 0.0, 6.0, 0.0]);
        assert_eq!(normal_cone_decompose(&set, &y, &Vector::zeros(4), 1e-8).unwrap()[0], 0.0);
        let interior = v(&[0.0, 0.0, 10.0, 0.0]);
        let err = normal_cone_decompose(&set, &interior, &v(&[1.0, 0.0, 0.0, 0.0]), 1e-8).unwrap_err();
        assert!(matches!(err, GeometryError::Infeasible { .. }));
        let err = normal_cone_decompose(&set, &v(&[0.0, 0.0, 1.0, 0.0]), &Vector::zeros(4), 1e-8).unwrap_err();
        assert!(matches!(err, GeometryError::NotInSet { .. }));
    }

    #[test]
    fn plicq_examples() {
        let set = corridor4();
        let c = plicq_check(&set, &v(&[0.0, 0.0, 6.0, 0.0]));
        assert!(c.holds);
        assert!((c.certificate - 2f64.sqrt()).abs() < 1e-12);

        let g1 = SmoothConstraint::affine(v(&[1.0, 0.0]), 0.0);
        let g2 = SmoothConstraint::affine(v(&[-1.0, 0.0]), 0.0);
        let anti = ConstraintSet::new(vec![g1, g2], constants()).unwrap();
        let c = plicq_check(&anti, &Vector::zeros(2));
        assert!(!c.holds);
        assert!(c.certificate < 1e-12);

        let g1 = SmoothConstraint::affine(v(&[1.0, 0.0]), 0.0);
        let g2 = SmoothConstraint::affine(v(&[0.0, 1.0]), 0.0);
        let orth = ConstraintSet::new(vec![g1, g2], constants()).unwrap();
        let c = plicq_check(&orth, &Vector::zeros(2));
        // Oracle: minimize ‖(λ, 1 − λ)‖ over a fine grid of λ ∈ [0, 1].
        let oracle = (0..=100_000)
            .map(|i| {
                let l = i as f64 / 100_000.0;
                (l * l + (1.0 - l) * (1.0 - l)).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        assert!((c.certificate - oracle).abs() < 1e-9);
        assert!((c.certificate - 0.5f64.sqrt()).abs() < 1e-12);

        let far = plicq_check(&orth, &v(&[1.0, 1.0]));
        assert!(far.holds && far.certificate.is_infinite());
    }

    #[test]
    fn prox_modulus_examples() {
        let base = GeometryConstants { m1: 1.0, m2: 2.0, m3: 1.0, beta: 1.0, rho: 1.0, c: 1.0 };
        let g = SmoothConstraint::affine(v(&[1.0]), 0.0);
        let set = ConstraintSet::new(vec![g.clone()], base).unwrap();
        assert_eq!(prox_modulus(&set, Some(2.0)), 2.0);
        let set = ConstraintSet::new(vec![g.clone()], GeometryConstants { m3: 2.0, beta: 4.0, ..base }).unwrap();
        assert_eq!(prox_modulus(&set, None), 0.125);
        let set = ConstraintSet::new(vec![g], GeometryConstants { m3: 0.0, ..base }).unwrap();
        assert!(prox_modulus(&set, None).is_infinite());
    }

    #[test]
    fn constants_are_validated() {
        let g = SmoothConstraint::affine(v(&[1.0]), 0.0);
        let err = ConstraintSet::new(vec![g.clone()], GeometryConstants { beta: 0.0, ..constants() }).unwrap_err();
        assert!(matches!(err, GeometryError::InvalidConstant { name: "beta", .. }));
        assert!(matches!(ConstraintSet::new(vec![], constants()), Err(GeometryError::Empty)));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let p = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, 0.0, 1.0, -1.0]);
        let sg = SmoothConstraint::sphere_gap(p, v(&[0.3, -0.2]), 1.0);
        let q = SmoothConstraint::quadratic(Matrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.5, 3.0]), v(&[1.0, 0.0, -1.0]), 0.5);
        for x in [v(&[0.4, -1.0, 2.0]), v(&[1.5, 0.2, -0.7])] {
            for c in [&sg, &q] {
                let (ge, he) = c.derivative_mismatch(&x);
                assert!(ge < 1e-5, "gradient mismatch {ge}");
                assert!(he < 1e-4, "hessian mismatch {he}");
            }
        }
    }

    #[test]
    fn assumption_audit_flags_bounds() {
        let set = disk_complement();
        let ok = set.check_standing_assumptions(&[v(&[1.0, 0.0]), v(&[0.0, 1.5])]);
        assert!(ok.holds, "{ok:?}");
        let bad = set.check_standing_assumptions(&[v(&[3.0, 0.0])]);
        assert!(!bad.holds);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn active_set_is_monotone_in_tolerance(x in -3.0..3.0f64, y in -3.0..3.0f64, t1 in 0.0..2.0f64, dt in 0.0..2.0f64) {
            let set = disk_complement();
            let p = v(&[x, y]);
            let a = active_indices(&set, &p, t1);
            let b = active_indices(&set, &p, t1 + dt);
            prop_assert!(a.active.iter().all(|i| b.active.contains(i)));
            if t1 <= set.constants().rho {
                prop_assert!(a.active.iter().all(|i| a.rho_active.contains(i)));
            }
        }

        #[test]
        fn disk_projection_is_optimal(r in 0.55..0.999f64, theta in 0.0..std::f64::consts::TAU) {
            let set = disk_complement();
            let z = v(&[r * theta.cos(), r * theta.sin()]);
            let p = project(&set, &z, &Vector::zeros(2)).unwrap();
            // Dense local grid oracle around the boundary.
            let mut best = f64::INFINITY;
            for i in 0..2000 {
                let phi = theta - 0.5 + i as f64 * 1.0 / 2000.0;
                for rad in [1.0, 1.0005, 1.001, 1.01] {
                    let c = v(&[rad * phi.cos(), rad * phi.sin()]);
                    best = best.min((c - &z).norm());
                }
            }
            prop_assert!(p.distance <= best + 1e-6);
            prop_assert!(set.min_value(&p.point) >= -1e-12);
        }

        #[test]
        fn disk_projection_satisfies_prox_inequality(r in 0.55..0.999f64, theta in 0.0..std::f64::consts::TAU, spread in 0.0..0.3f64) {
            let set = disk_complement();
            let eta = prox_modulus(&set, None);
            let z = v(&[r * theta.cos(), r * theta.sin()]);
            let p = project(&set, &z, &Vector::zeros(2)).unwrap();
            let n = &z - &p.point;
            for i in 0..200 {
                let phi = theta + spread * (i as f64 / 199.0 - 0.5);
                let rad = 1.0 + 0.2 * (i % 7) as f64 / 7.0;
                let c = v(&[rad * phi.cos(), rad * phi.sin()]);
                let d = &c - &p.point;
                prop_assert!(n.dot(&d) <= n.norm() / (2.0 * eta) * d.norm_squared() + 1e-9);
            }
        }

        #[test]
        fn half_space_projection_is_optimal(z0 in -5.0..5.0f64, z2 in -5.0..5.0f64, z1 in -1.0..1.0f64) {
            let set = corridor4();
            let z = v(&[z0, z1, z2, 0.0]);
            let p = project(&set, &z, &Vector::zeros(4)).unwrap();
            // Quadratic-program oracle for one half-space.
            let a = v(&[-1.0, 0.0, 1.0, 0.0]);
            let shortfall = (6.0 - a.dot(&z)).max(0.0);
            let oracle = &z + &a * (shortfall / 2.0);
            prop_assert!((&p.point - oracle).norm() <= 1e-9);
        }

        #[test]
        fn decompose_reconstructs_cone_elements(l1 in 0.0..5.0f64, l2 in 0.0..5.0f64) {
            let g1 = SmoothConstraint::affine(v(&[1.0, 0.2]), 0.0);
            let g2 = SmoothConstraint::affine(v(&[-0.3, 1.0]), 0.0);
            let set = ConstraintSet::new(vec![g1, g2], constants()).unwrap();
            let y = Vector::zeros(2);
            prop_assume!(plicq_check(&set, &y).holds);
            let target = v(&[1.0, 0.2]) * l1 + v(&[-0.3, 1.0]) * l2;
            let lam = normal_cone_decompose(&set, &y, &target, 1e-8).unwrap();
            let recon = v(&[1.0, 0.2]) * lam[0] + v(&[-0.3, 1.0]) * lam[1];
            prop_assert!((recon - target).norm() <= 1e-8);
        }
    }
}
