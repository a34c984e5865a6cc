//! Second-order generalized differentiation: coderivatives of the normal cone
//! to the nonpositive orthant, of the normal cone to an inequality-defined set,
//! and of the sweeping velocity mapping `F(x,u,a) = N_C(x−u) − f(x,a)`.

use thiserror::Error;

use crate::controls::GeneratorSign;
use crate::dynamics::PerturbationMap;
use crate::geometry::{plicq_check, ConstraintSet};
use crate::linalg::{nnls, Matrix, Vector};

/// Tolerance for strict inequalities in the sign rules and for activity.
pub const SIGN_TOL: f64 = 1e-8;

/// Largest number of active constraints for which multiplier vertices are enumerated.
pub const MAX_ENUMERATION: usize = 6;

/// Errors of the coderivative routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum VariationalError {
    #[error("point is not on the graph of the orthant normal cone: {0}")]
    NotOnGraph(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("positive linear independence fails at the base point (certificate {0:.3e})")]
    PlicqFails(f64),
    #[error("normal vector is not generated by the active gradients (residual {0:.3e})")]
    NoMultiplier(f64),
    #[error("multiplier is not unique and {0} active constraints exceed the enumeration limit")]
    AmbiguousMultiplier(usize),
}

/// A point `(x, v)` with `x ≤ 0`, `v ≥ 0` and `x_i v_i = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthantGraphPoint {
    x: Vector,
    v: Vector,
}

impl OrthantGraphPoint {
    /// Validates membership in the graph of `N_{R^m_-}`.
    pub fn new(x: Vector, v: Vector) -> Result<Self, VariationalError> {
        if x.len() != v.len() {
            return Err(VariationalError::DimensionMismatch { expected: x.len(), got: v.len() });
        }
        for i in 0..x.len() {
            if !(x[i] <= 0.0) || !(v[i] >= 0.0) || x[i] * v[i] != 0.0 {
                return Err(VariationalError::NotOnGraph(format!("component {i}: x = {}, v = {}", x[i], v[i])));
            }
        }
        Ok(Self { x, v })
    }

    /// Base point.
    pub fn x(&self) -> &Vector {
        &self.x
    }

    /// Normal vector.
    pub fn v(&self) -> &Vector {
        &self.v
    }
}

/// Kind of an orthant coderivative value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoderivativeKind {
    /// The coderivative is empty at this direction.
    Empty,
    /// A polyhedral cone described by index sets.
    Cone,
}

/// Coderivative of `N_{R^m_-}` at a graph point in a direction `y`:
/// `{γ : γ_i = 0 on zero_indices, γ_i ≥ 0 on nonneg_indices}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrthantCoderivativeSet {
    /// Empty or cone.
    pub kind: CoderivativeKind,
    /// Indices with `γ_i = 0`.
    pub zero_indices: Vec<usize>,
    /// Indices with `γ_i ≥ 0`.
    pub nonneg_indices: Vec<usize>,
    /// Indices with `γ_i` unrestricted.
    pub free_indices: Vec<usize>,
}

impl OrthantCoderivativeSet {
    /// Membership test with tolerance `tol`.
    pub fn contains(&self, gamma: &[f64], tol: f64) -> bool {
        self.kind == CoderivativeKind::Cone
            && self.zero_indices.iter().all(|&i| gamma[i].abs() <= tol)
            && self.nonneg_indices.iter().all(|&i| gamma[i] >= -tol)
    }

    /// Sign pattern per index; `None` marks a forced zero.
    pub fn sign_of(&self, i: usize) -> Option<GeneratorSign> {
        if self.nonneg_indices.contains(&i) {
            Some(GeneratorSign::Nonnegative)
        } else if self.free_indices.contains(&i) {
            Some(GeneratorSign::Free)
        } else {
            None
        }
    }
}

fn orthant_rules(x: &[f64], v: &[f64], y: &[f64], tol: f64) -> OrthantCoderivativeSet {
    let m = x.len();
    let empty = (0..m).any(|i| v[i].abs() > tol && y[i].abs() > tol);
    if empty {
        return OrthantCoderivativeSet { kind: CoderivativeKind::Empty, zero_indices: vec![], nonneg_indices: vec![], free_indices: vec![] };
    }
    let (mut zero, mut nonneg, mut free) = (vec![], vec![], vec![]);
    for i in 0..m {
        let v_zero = v[i].abs() <= tol;
        if x[i] < -tol || (v_zero && y[i] < -tol) {
            zero.push(i);
        } else if x[i].abs() <= tol && v_zero && y[i] > tol {
            nonneg.push(i);
        } else {
            free.push(i);
        }
    }
    OrthantCoderivativeSet { kind: CoderivativeKind::Cone, zero_indices: zero, nonneg_indices: nonneg, free_indices: free }
}

/// Coderivative `D*N_{R^m_-}(x,v)(y)` with exact index rules.
pub fn coderivative_orthant(pt: &OrthantGraphPoint, y: &Vector) -> Result<OrthantCoderivativeSet, VariationalError> {
    if y.len() != pt.x.len() {
        return Err(VariationalError::DimensionMismatch { expected: pt.x.len(), got: y.len() });
    }
    Ok(orthant_rules(pt.x.as_slice(), pt.v.as_slice(), y.as_slice(), 0.0))
}

/// A set `fixed + Σ c_j g_j` with coefficients obeying the listed signs.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricSet {
    /// Multiplier vector `λ̄` the description was built from.
    pub multiplier: Vector,
    /// Fixed part.
    pub fixed: Vector,
    /// Generators with their coefficient signs.
    pub generators: Vec<(Vector, GeneratorSign)>,
}

impl ParametricSet {
    /// Distance from `q` to the set.
    pub fn distance(&self, q: &Vector) -> f64 {
        crate::ocp::cone_distance(&self.generators, &(q - &self.fixed))
    }
}

/// Upper estimate of `D*N_C(x̄, v̄)(y)`, one parametric set per multiplier vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalConeCoderivative {
    /// Nonempty candidate sets.
    pub candidates: Vec<ParametricSet>,
    /// True when the multiplier `λ̄` is not unique; the union is then only an upper estimate.
    pub ambiguous: bool,
}

fn weighted_hessian(set: &ConstraintSet, y: &Vector, lambda: &Vector) -> Matrix {
    let n = set.dim();
    let mut h = Matrix::zeros(n, n);
    for (i, g) in set.constraints().iter().enumerate() {
        if lambda[i] != 0.0 {
            h += g.hessian(y) * lambda[i];
        }
    }
    h
}

fn rank(m: &Matrix) -> usize {
    if m.ncols() == 0 {
        return 0;
    }
    m.clone().svd(false, false).rank(1e-10 * m.norm().max(1.0))
}

/// Vertices of `{λ ≥ 0 : −Σ λ_i ∇g_i(x̄) = v̄, λ_i = 0 off the active set}`.
fn multiplier_vertices(set: &ConstraintSet, xbar: &Vector, vbar: &Vector, active: &[usize]) -> Result<(Vec<Vector>, bool), VariationalError> {
    let m = set.len();
    let scale = 1.0 + vbar.norm();
    let g = set.gradient_columns(xbar, active);
    if active.is_empty() {
        return if vbar.norm() > 1e-8 * scale { Err(VariationalError::NoMultiplier(vbar.norm())) } else { Ok((vec![Vector::zeros(m)], false)) };
    }
    let fit = nnls(&g, &(-vbar));
    if fit.residual > 1e-8 * scale {
        return Err(VariationalError::NoMultiplier(fit.residual));
    }
    let embed = |idx: &[usize], vals: &Vector| {
        let mut lam = Vector::zeros(m);
        for (p, &i) in idx.iter().enumerate() {
            lam[active[i]] = vals[p];
        }
        lam
    };
    if rank(&g) == active.len() {
        let all: Vec<usize> = (0..active.len()).collect();
        return Ok((vec![embed(&all, &fit.x)], false));
    }
    if active.len() > MAX_ENUMERATION {
        return Err(VariationalError::AmbiguousMultiplier(active.len()));
    }
    let mut vertices: Vec<Vector> = Vec::new();
    for mask in 0u32..(1 << active.len()) {
        let idx: Vec<usize> = (0..active.len()).filter(|p| mask & (1 << p) != 0).collect();
        let cols = Matrix::from_fn(g.nrows(), idx.len(), |r, c| g[(r, idx[c])]);
        if rank(&cols) != idx.len() {
            continue;
        }
        let sol = if idx.is_empty() { Vector::zeros(0) } else { crate::linalg::least_squares(&cols, &(-vbar)) };
        let resid = if idx.is_empty() { vbar.norm() } else { (&cols * &sol + vbar).norm() };
        if resid > 1e-8 * scale || sol.iter().any(|&l| l < -1e-10) {
            continue;
        }
        let lam = embed(&idx, &sol.map(|l| l.max(0.0)));
        if !vertices.iter().any(|w| (w - &lam).norm() <= 1e-9 * scale) {
            vertices.push(lam);
        }
    }
    Ok((vertices, true))
}

/// Upper estimate of the coderivative of `N_C` at `(x̄, v̄)` in direction `y`.
///
/// Each candidate is `−(Σ λ̄_i ∇²g_i(x̄)) y − ∇g(x̄)ᵀ γ` with `γ` ranging over the
/// orthant coderivative at `(−g(x̄), λ̄)` in direction `−∇g(x̄) y`.
pub fn coderivative_normal_cone(set: &ConstraintSet, xbar: &Vector, vbar: &Vector, y: &Vector) -> Result<NormalConeCoderivative, VariationalError> {
    let n = set.dim();
    for len in [xbar.len(), vbar.len(), y.len()] {
        if len != n {
            return Err(VariationalError::DimensionMismatch { expected: n, got: len });
        }
    }
    let cert = plicq_check(set, xbar);
    if !cert.holds {
        return Err(VariationalError::PlicqFails(cert.certificate));
    }
    let values = set.values(xbar);
    let active: Vec<usize> = (0..set.len()).filter(|&i| values[i].abs() <= SIGN_TOL).collect();
    let (vertices, ambiguous) = multiplier_vertices(set, xbar, vbar, &active)?;
    let grads: Vec<Vector> = set.constraints().iter().map(|g| g.gradient(xbar)).collect();
    let xo: Vec<f64> = values.iter().map(|g| -g).collect();
    let yo: Vec<f64> = grads.iter().map(|g| -g.dot(y)).collect();
    let mut candidates = Vec::new();
    for lam in vertices {
        let rules = orthant_rules(&xo, lam.as_slice(), &yo, SIGN_TOL);
        if rules.kind == CoderivativeKind::Empty {
            continue;
        }
        let fixed = -(weighted_hessian(set, xbar, &lam) * y);
        let generators = (0..set.len()).filter_map(|i| rules.sign_of(i).map(|s| (-&grads[i], s))).collect();
        candidates.push(ParametricSet { multiplier: lam, fixed, generators });
    }
    Ok(NormalConeCoderivative { candidates, ambiguous })
}

/// Sign rule for `γ_i` in the velocity-mapping estimate: `None` forces zero.
fn gamma_sign(value: f64, directional: f64) -> Option<GeneratorSign> {
    if value > SIGN_TOL || directional > SIGN_TOL {
        None
    } else if directional < -SIGN_TOL {
        Some(GeneratorSign::Nonnegative)
    } else {
        Some(GeneratorSign::Free)
    }
}

/// Indices whose multiplier may be positive: active with `⟨∇g_i, y⟩ = 0`.
fn admissible_multipliers(values: &[f64], directional: &[f64]) -> Vec<usize> {
    (0..values.len()).filter(|&i| values[i].abs() <= SIGN_TOL && directional[i].abs() <= SIGN_TOL).collect()
}

/// Tests whether `y` lies in the estimated domain of `D*N_C(x−u, w+f(x,a))`:
/// some `λ ≥ 0` solves `−Σ λ_i ∇g_i(x−u) = w + f(x,a)` with `λ_i⟨∇g_i(x−u), y⟩ = 0`.
pub fn coderivative_domain_check(set: &ConstraintSet, f: &PerturbationMap, x: &Vector, u: &Vector, a: &Vector, w: &Vector, y: &Vector) -> bool {
    let z = x - u;
    let target = w + f.value(x, a);
    let values = set.values(&z);
    let directional: Vec<f64> = set.constraints().iter().map(|g| g.gradient(&z).dot(y)).collect();
    let idx = admissible_multipliers(&values, &directional);
    let g = set.gradient_columns(&z, &idx);
    let resid = if idx.is_empty() { target.norm() } else { nnls(&g, &(-&target)).residual };
    resid <= 1e-8 * (1.0 + target.norm())
}

/// Witness multipliers for an accepted candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipWitness {
    /// `λ ≥ 0` with `−Σ λ_i ∇g_i = w + f`.
    pub lambda: Vector,
    /// `γ` obeying the sign rules.
    pub gamma: Vector,
    /// Residual of the linear system at the witness.
    pub residual: f64,
}

/// Outcome of [`coderivative_f_member`].
#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    /// Whether the candidate belongs to the estimate.
    pub accepted: bool,
    /// Multipliers realizing the best fit, when the forced components match.
    pub witness: Option<MembershipWitness>,
}

/// Tests `(q_x, q_u, q_a)` against the upper estimate of `D*F(x,u,a,w)(y)`:
/// `q_x = −∇_x fᵀy − (Σλ_i∇²g_i)y − ∇gᵀγ`, `q_u = (Σλ_i∇²g_i)y + ∇gᵀγ`, `q_a = −∇_a fᵀy`.
#[allow(clippy::too_many_arguments)]
pub fn coderivative_f_member(
    set: &ConstraintSet,
    f: &PerturbationMap,
    x: &Vector,
    u: &Vector,
    a: &Vector,
    w: &Vector,
    y: &Vector,
    candidate: (&Vector, &Vector, &Vector),
) -> Membership {
    let (qx, qu, qa) = candidate;
    let n = set.dim();
    let m = set.len();
    let cand_norm = (qx.norm_squared() + qu.norm_squared() + qa.norm_squared()).sqrt();
    let tol = 1e-8 * (1.0 + cand_norm);
    let reject = Membership { accepted: false, witness: None };

    let forced_a = -(f.jac_a(x, a).transpose() * y);
    let forced_sum = -(f.jac_x(x, a).transpose() * y);
    if (qa - &forced_a).norm() > tol || (qx + qu - &forced_sum).norm() > tol {
        return reject;
    }

    let z = x - u;
    let target = w + f.value(x, a);
    let values = set.values(&z);
    let grads: Vec<Vector> = set.constraints().iter().map(|g| g.gradient(&z)).collect();
    let directional: Vec<f64> = grads.iter().map(|g| g.dot(y)).collect();
    let lam_idx = admissible_multipliers(&values, &directional);
    let hy: Vec<Vector> = set.constraints().iter().map(|g| g.hessian(&z) * y).collect();

    // Columns: λ_i (≥ 0) on admissible indices, then γ_i split into ± parts as the sign rule allows.
    // Rows: [−Σλ_i∇g_i = target ; Σλ_i H_i y + Σγ_i∇g_i = q_u].
    enum Col {
        Lambda(usize),
        Gamma(usize, f64),
    }
    let mut cols: Vec<Col> = lam_idx.iter().map(|&i| Col::Lambda(i)).collect();
    for i in 0..m {
        match gamma_sign(values[i], directional[i]) {
            None => {}
            Some(GeneratorSign::Nonnegative) => cols.push(Col::Gamma(i, 1.0)),
            Some(GeneratorSign::Free) => {
                cols.push(Col::Gamma(i, 1.0));
                cols.push(Col::Gamma(i, -1.0));
            }
        }
    }
    let mut mat = Matrix::zeros(2 * n, cols.len());
    for (c, col) in cols.iter().enumerate() {
        match *col {
            Col::Lambda(i) => {
                for r in 0..n {
                    mat[(r, c)] = -grads[i][r];
                    mat[(n + r, c)] = hy[i][r];
                }
            }
            Col::Gamma(i, s) => {
                for r in 0..n {
                    mat[(n + r, c)] = s * grads[i][r];
                }
            }
        }
    }
    let mut rhs = Vector::zeros(2 * n);
    rhs.rows_mut(0, n).copy_from(&target);
    rhs.rows_mut(n, n).copy_from(qu);
    let (coef, residual) = if cols.is_empty() {
        (Vector::zeros(0), rhs.norm())
    } else {
        let sol = nnls(&mat, &rhs);
        (sol.x, sol.residual)
    };
    let mut lambda = Vector::zeros(m);
    let mut gamma = Vector::zeros(m);
    for (c, col) in cols.iter().enumerate() {
        match *col {
            Col::Lambda(i) => lambda[i] = coef[c],
            Col::Gamma(i, s) => gamma[i] += s * coef[c],
        }
    }
    let accepted = residual <= tol + 1e-8 * target.norm();
    Membership { accepted, witness: Some(MembershipWitness { lambda, gamma, residual }) }
}
