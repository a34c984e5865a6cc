//! Necessary optimality conditions for the discrete problem: auxiliary
//! quantities, the residuals of the primal-dual system at a candidate pair,
//! and least-squares recovery of dual variables for a given primal.

use rayon::prelude::*;
use thiserror::Error;

use crate::approximation::Side;
use crate::controls::GeneratorSign;
use crate::dynamics::{cone_fit, ACTIVE_TOL};
use crate::linalg::{sign_constrained_least_squares, Matrix, SparseMatrix, VarSign, Vector};
use crate::ocp::{cone_distance, DiscreteDecision, OcpError, RunningGradient, SweepingOCP};

/// Tolerance used to classify indices (`g_i > 0`, `η_i = 0`, sign of `⟨∇g_i, Λ⟩`).
pub const INDEX_TOL: f64 = 1e-8;

/// Errors of the residual evaluator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimalityError {
    #[error("dual variables are malformed: {0}")]
    MalformedDuals(String),
    #[error("endpoint set has no closed-form normal cone: {0}")]
    UnsupportedEndpointSet(String),
    #[error(transparent)]
    Ocp(#[from] OcpError),
}

/// Dual elements of the discrete necessary conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVariables {
    /// Cost multiplier `λ ≥ 0`.
    pub lambda: f64,
    /// Terminal multipliers `α ∈ R^m_+`.
    pub alpha: Vector,
    /// State adjoints `p^x_j`, `j = 0..k`.
    pub px: Vec<Vector>,
    /// Shift adjoints `p^u_j`, `j = 0..k`.
    pub pu: Vec<Vector>,
    /// Multipliers of the shift constraints, `ψ^u_j ∈ R^s_+`, `j = 0..k−1`.
    pub psi_u: Vec<Vector>,
    /// Multipliers of the control set, `ψ^a_j ∈ R^d`, `j = 0..k−1`.
    pub psi_a: Vec<Vector>,
    /// Contact multipliers `η_j ∈ R^m_+`, `j = 0..k−1`.
    pub eta: Vec<Vector>,
    /// Coderivative multipliers `γ_j ∈ R^m`, `j = 0..k−1`.
    pub gamma: Vec<Vector>,
}

impl DualVariables {
    /// All-zero duals shaped for `p` on `k` cells.
    pub fn zeros(p: &SweepingOCP, k: usize) -> Self {
        let (n, m, s, d) = (p.geometry.dim(), p.geometry.len(), p.shift_set.len(), p.control_set.dim());
        Self {
            lambda: 0.0,
            alpha: Vector::zeros(m),
            px: vec![Vector::zeros(n); k + 1],
            pu: vec![Vector::zeros(n); k + 1],
            psi_u: vec![Vector::zeros(s); k],
            psi_a: vec![Vector::zeros(d); k],
            eta: vec![Vector::zeros(m); k],
            gamma: vec![Vector::zeros(m); k],
        }
    }

    /// `λ + ‖α‖ + Σ‖p^x_j‖ + ‖p^u_0‖ + Σ(‖ψ^u_j‖ + ‖ψ^a_j‖)`.
    pub fn normalization(&self) -> f64 {
        self.lambda
            + self.alpha.norm()
            + self.px.iter().map(|p| p.norm()).sum::<f64>()
            + self.pu[0].norm()
            + self.psi_u.iter().chain(&self.psi_a).map(|p| p.norm()).sum::<f64>()
    }

    /// `λ + Σ‖ψ^u_j‖ + ‖p^x_k‖ + ‖p^u_0‖`.
    pub fn enhanced_margin(&self) -> f64 {
        self.lambda + self.psi_u.iter().map(|p| p.norm()).sum::<f64>() + self.px[self.px.len() - 1].norm() + self.pu[0].norm()
    }

    /// Multiplies every dual except the contact multipliers `η` by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let sc = |v: &[Vector]| v.iter().map(|x| x * s).collect::<Vec<_>>();
        Self {
            lambda: self.lambda * s,
            alpha: &self.alpha * s,
            px: sc(&self.px),
            pu: sc(&self.pu),
            psi_u: sc(&self.psi_u),
            psi_a: sc(&self.psi_a),
            eta: self.eta.clone(),
            gamma: sc(&self.gamma),
        }
    }

    fn check(&self, p: &SweepingOCP, k: usize) -> Result<(), OptimalityError> {
        let (n, m, s, d) = (p.geometry.dim(), p.geometry.len(), p.shift_set.len(), p.control_set.dim());
        let ok = self.alpha.len() == m
            && self.px.len() == k + 1
            && self.pu.len() == k + 1
            && self.px.iter().chain(&self.pu).all(|v| v.len() == n)
            && [&self.psi_u, &self.psi_a, &self.eta, &self.gamma].iter().all(|v| v.len() == k)
            && self.psi_u.iter().all(|v| v.len() == s)
            && self.psi_a.iter().all(|v| v.len() == d)
            && self.eta.iter().chain(&self.gamma).all(|v| v.len() == m);
        if !ok {
            return Err(OptimalityError::MalformedDuals(format!("shapes do not match k = {k}, n = {n}, m = {m}, s = {s}, d = {d}")));
        }
        if !self.lambda.is_finite() {
            return Err(OptimalityError::MalformedDuals("λ is not finite".into()));
        }
        Ok(())
    }
}

/// Primal-only quantities entering the dual system.
#[derive(Debug, Clone)]
pub struct PrimalData {
    /// `θ^X_j = ∫ (Δx_j/h − ẋ̄) dt`.
    pub theta_x: Vec<Vector>,
    /// `θ^U_j = ∫ (Δu_j/h − u̇̄) dt`.
    pub theta_u: Vec<Vector>,
    /// `θ^a_j = ∫ (a_j − ā) dt`.
    pub theta_a: Vec<Vector>,
    /// Running-cost gradients `(w^x, w^u, w^a, v^x, v^u)` per cell.
    pub subgradients: Vec<RunningGradient>,
    /// Running-cost values `ℓ_j`.
    pub running: Vec<f64>,
    /// `ϱ`, built from one-sided reference limits inside each cell.
    pub varrho: f64,
    /// Step `h = T/k`.
    pub h: f64,
}

/// Auxiliary quantities that depend on the duals.
#[derive(Debug, Clone)]
pub struct AuxiliaryQuantities {
    /// Primal-only part.
    pub primal: PrimalData,
    /// `H̄`.
    pub hbar: f64,
    /// `Λ_j = p^x_{j+1} − λ(θ^X_j/h + v^x_j)`.
    pub lambda_j: Vec<Vector>,
    /// `ξ_j = (Σ_i η_ji ∇²g_i(x_j − u_j)) Λ_j`.
    pub xi: Vec<Vector>,
}

fn reference_jet(p: &SweepingOCP, t: f64, side: Side) -> (Vector, Vector, Vector) {
    let r = &p.reference;
    (r.a_side(t, side), r.x_dot_side(t, side), r.u_dot_side(t, side))
}

/// Evaluates the θ integrals, subgradients, running costs and `ϱ`.
pub fn primal_data(p: &SweepingOCP, d: &DiscreteDecision) -> PrimalData {
    let k = d.k();
    let h = d.h();
    let quad = p.quadrature();
    let per_cell: Vec<_> = (0..k)
        .into_par_iter()
        .map(|j| {
            let (t0, t1) = (d.time(j), d.time(j + 1));
            let xq = d.x_quotient(j);
            let uq = d.u_quotient(j);
            let n = xq.len();
            let tx = quad.integrate_vec(t0, t1, n, |t| &xq - p.reference.x_dot(t));
            let tu = quad.integrate_vec(t0, t1, n, |t| &uq - p.reference.u_dot(t));
            let ta = quad.integrate_vec(t0, t1, d.a[j].len(), |t| &d.a[j] - p.reference.a(t));
            let grad = p.running.gradient(t0, &d.x[j], &d.u[j], &d.a[j], &xq, &uq);
            let ell = p.running.value(t0, &d.x[j], &d.u[j], &d.a[j], &xq, &uq);
            let dist2 = |(ra, rx, ru): (Vector, Vector, Vector)| (&d.a[j] - ra).norm_squared() + (&xq - rx).norm_squared() + (&uq - ru).norm_squared();
            let end = dist2(reference_jet(p, t1, Side::Left));
            let start = dist2(reference_jet(p, t0, Side::Right));
            let rho = ((j + 1) as f64 / k as f64) * end - (j as f64 / k as f64) * start;
            (tx, tu, ta, grad, ell, rho)
        })
        .collect();
    let mut out = PrimalData { theta_x: vec![], theta_u: vec![], theta_a: vec![], subgradients: vec![], running: vec![], varrho: 0.0, h };
    for (tx, tu, ta, grad, ell, rho) in per_cell {
        out.theta_x.push(tx);
        out.theta_u.push(tu);
        out.theta_a.push(ta);
        out.subgradients.push(grad);
        out.running.push(ell);
        out.varrho -= rho;
    }
    out
}

fn weighted_hessian(p: &SweepingOCP, y: &Vector, eta: &Vector) -> Matrix {
    let n = p.geometry.dim();
    let mut hm = Matrix::zeros(n, n);
    for (i, g) in p.geometry.constraints().iter().enumerate() {
        if eta[i] != 0.0 {
            hm += g.hessian(y) * eta[i];
        }
    }
    hm
}

/// Computes `H̄`, `Λ_j` and `ξ_j` from primal data and duals.
pub fn compute_auxiliary(p: &SweepingOCP, d: &DiscreteDecision, duals: &DualVariables) -> Result<AuxiliaryQuantities, OptimalityError> {
    let primal = primal_data(p, d);
    auxiliary_from(p, d, duals, primal)
}

fn auxiliary_from(p: &SweepingOCP, d: &DiscreteDecision, duals: &DualVariables, primal: PrimalData) -> Result<AuxiliaryQuantities, OptimalityError> {
    let k = d.k();
    duals.check(p, k)?;
    let h = primal.h;
    let lam = duals.lambda;
    let lambda_j: Vec<Vector> = (0..k).map(|j| &duals.px[j + 1] - (&primal.theta_x[j] / h + &primal.subgradients[j].xd) * lam).collect();
    let xi: Vec<Vector> = (0..k).map(|j| weighted_hessian(p, &(&d.x[j] - &d.u[j]), &duals.eta[j]) * &lambda_j[j]).collect();
    let hbar = (0..k)
        .map(|j| duals.px[j + 1].dot(&d.x_quotient(j)) + duals.pu[j + 1].dot(&d.u_quotient(j)) - lam * primal.running[j])
        .sum::<f64>()
        / k as f64;
    Ok(AuxiliaryQuantities { primal, hbar, lambda_j, xi })
}

/// Per-cell defect vectors of the equations of the dual system.
#[derive(Debug, Clone)]
pub struct EquationDefects {
    /// `Δx/h − σf − Σ_{active} η ∇g`.
    pub dynamics: Vec<Vector>,
    /// State adjoint equation.
    pub adjoint_x: Vec<Vector>,
    /// Shift adjoint equation.
    pub adjoint_u: Vec<Vector>,
    /// Control equation.
    pub adjoint_a: Vec<Vector>,
    /// `p^u_{j+1} − λ(v^u_j + θ^U_j/h)`.
    pub pu_link: Vec<Vector>,
    /// `p^u_k + Σ α_i ∇g_i(x_k − u_k)`.
    pub transversality_u: Vector,
    /// Left-hand side of the endpoint inclusion minus `λ ∂φ`, as `(x-part, T-part)`.
    pub transversality_xt: Vector,
}

fn active_gradients(p: &SweepingOCP, y: &Vector) -> (Vec<f64>, Vec<Vector>) {
    let values = p.geometry.values(y);
    let grads = p.geometry.constraints().iter().map(|g| g.gradient(y)).collect();
    (values, grads)
}

/// Evaluates the defect vectors at a primal-dual pair.
pub fn equation_defects(p: &SweepingOCP, d: &DiscreteDecision, duals: &DualVariables, aux: &AuxiliaryQuantities) -> EquationDefects {
    let k = d.k();
    let h = aux.primal.h;
    let lam = duals.lambda;
    let sigma = p.sign.factor();
    let per_cell: Vec<_> = (0..k)
        .into_par_iter()
        .map(|j| {
            let y = &d.x[j] - &d.u[j];
            let (values, grads) = active_gradients(p, &y);
            let sub = &aux.primal.subgradients[j];
            let jx = p.dynamics.jac_x(&d.x[j], &d.a[j]) * sigma;
            let ja = p.dynamics.jac_a(&d.x[j], &d.a[j]) * sigma;
            let big = &aux.lambda_j[j];
            let mut contact = Vector::zeros(y.len());
            let mut gamma_sum = Vector::zeros(y.len());
            for i in 0..grads.len() {
                if values[i] <= ACTIVE_TOL {
                    contact += &grads[i] * duals.eta[j][i];
                }
                gamma_sum += &grads[i] * duals.gamma[j][i];
            }
            let dyn_def = d.x_quotient(j) - p.dynamics.value(&d.x[j], &d.a[j]) * sigma - contact;
            let adj_x = (&duals.px[j + 1] - &duals.px[j]) / h - &sub.x * lam + jx.transpose() * big + &aux.xi[j] + &gamma_sum;
            let mut psi_sum = Vector::zeros(y.len());
            for (i, nu) in p.shift_set.functions().iter().enumerate() {
                psi_sum += nu.gradient(&d.u[j]) * duals.psi_u[j][i];
            }
            let adj_u = (&duals.pu[j + 1] - &duals.pu[j]) / h - &sub.u * lam - psi_sum / h - &aux.xi[j] - &gamma_sum;
            let adj_a = -(&sub.a * lam) - &aux.primal.theta_a[j] * (lam / h) - &duals.psi_a[j] / h + ja.transpose() * big;
            let link = &duals.pu[j + 1] - (&sub.ud + &aux.primal.theta_u[j] / h) * lam;
            (dyn_def, adj_x, adj_u, adj_a, link)
        })
        .collect();
    let mut out = EquationDefects {
        dynamics: vec![],
        adjoint_x: vec![],
        adjoint_u: vec![],
        adjoint_a: vec![],
        pu_link: vec![],
        transversality_u: Vector::zeros(0),
        transversality_xt: Vector::zeros(0),
    };
    for (a, b, c, e, f) in per_cell {
        out.dynamics.push(a);
        out.adjoint_x.push(b);
        out.adjoint_u.push(c);
        out.adjoint_a.push(e);
        out.pu_link.push(f);
    }
    let yk = &d.x[k] - &d.u[k];
    let (_, grads) = active_gradients(p, &yk);
    let mut alpha_sum = Vector::zeros(yk.len());
    for (i, g) in grads.iter().enumerate() {
        alpha_sum += g * duals.alpha[i];
    }
    out.transversality_u = &duals.pu[k] + &alpha_sum;
    let (phi_x, phi_t) = p.terminal.subgradient(&d.x[k], d.horizon);
    let n = yk.len();
    let mut xt = Vector::zeros(n + 1);
    xt.rows_mut(0, n).copy_from(&(-&duals.px[k] + &alpha_sum - phi_x * lam));
    xt[n] = aux.hbar + lam * (p.t_bar() - d.horizon) + lam * aux.primal.varrho - lam * phi_t;
    out.transversality_xt = xt;
    out
}

/// Generators of `N(x_k; Ξ_x + μB) × N(T; Ξ_T + μB)` embedded in `R^{n+1}`.
pub fn endpoint_generators(p: &SweepingOCP, d: &DiscreteDecision) -> Vec<(Vector, GeneratorSign)> {
    let k = d.k();
    let n = p.geometry.dim();
    let inflate = p.budget().mu_x_k;
    let mut out = Vec::new();
    for (g, s) in p.xi_x.normal_cone_generators(&d.x[k], inflate) {
        let mut e = Vector::zeros(n + 1);
        e.rows_mut(0, n).copy_from(&g);
        out.push((e, s));
    }
    for (g, s) in p.xi_t.normal_cone_generators(&Vector::from_element(1, d.horizon), inflate) {
        let mut e = Vector::zeros(n + 1);
        e[n] = g[0];
        out.push((e, s));
    }
    out
}

/// Named residuals of the necessary conditions; each is zero when its condition holds.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub dynamics: f64,
    pub adjoint_x: f64,
    pub adjoint_u: f64,
    pub adjoint_a: f64,
    pub pu_link: f64,
    pub transversality_u: f64,
    pub transversality_xt: f64,
    pub slack_eta: f64,
    pub slack_gamma_i1: f64,
    pub slack_gamma_i2: f64,
    pub slack_alpha: f64,
    pub eta_orthogonality: f64,
    pub nontriviality: f64,
    pub enhanced_nontriviality: f64,
    pub psi_u_cone: f64,
    pub psi_a_cone: f64,
    /// Value of `λ + Σ‖ψ^u‖ + ‖p^x_k‖ + ‖p^u_0‖` (informational).
    pub enhanced_margin: f64,
    /// Pass threshold for every residual.
    pub tol: f64,
}

impl ResidualReport {
    /// `(name, residual)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("dynamics", self.dynamics),
            ("adjoint_x", self.adjoint_x),
            ("adjoint_u", self.adjoint_u),
            ("adjoint_a", self.adjoint_a),
            ("pu_link", self.pu_link),
            ("transversality_u", self.transversality_u),
            ("transversality_xT", self.transversality_xt),
            ("slack_eta", self.slack_eta),
            ("slack_gamma_I1", self.slack_gamma_i1),
            ("slack_gamma_I2", self.slack_gamma_i2),
            ("slack_alpha", self.slack_alpha),
            ("eta_orthogonality", self.eta_orthogonality),
            ("nontriviality", self.nontriviality),
            ("enhanced_nontriviality", self.enhanced_nontriviality),
            ("psi_u_cone", self.psi_u_cone),
            ("psi_a_cone", self.psi_a_cone),
        ]
    }

    /// Residuals of the equations that are positively homogeneous in the duals.
    pub fn equation_entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("adjoint_x", self.adjoint_x),
            ("adjoint_u", self.adjoint_u),
            ("adjoint_a", self.adjoint_a),
            ("pu_link", self.pu_link),
            ("transversality_u", self.transversality_u),
            ("transversality_xT", self.transversality_xt),
        ]
    }

    /// Sum of all residuals.
    pub fn total(&self) -> f64 {
        self.entries().iter().map(|(_, r)| r).sum()
    }

    /// Names of residuals above `tol`.
    pub fn failing(&self) -> Vec<&'static str> {
        self.entries().into_iter().filter(|(_, r)| !(*r <= self.tol)).map(|(n, _)| n).collect()
    }

    /// True when every residual is at most `tol`.
    pub fn passes(&self) -> bool {
        self.failing().is_empty()
    }
}

fn max_norm(v: &[Vector]) -> f64 {
    v.iter().map(|x| x.norm()).fold(0.0, f64::max)
}

fn check_endpoint_sets(p: &SweepingOCP) -> Result<(), OptimalityError> {
    use crate::ocp::EndpointSet;
    let dim = |e: &EndpointSet| match e {
        EndpointSet::AllSpace => None,
        EndpointSet::Point(z) => Some(z.len()),
        EndpointSet::Box { lower, .. } => Some(lower.len()),
        EndpointSet::HalfLine { .. } => Some(1),
    };
    if dim(&p.xi_x).is_some_and(|n| n != p.geometry.dim()) {
        return Err(OptimalityError::UnsupportedEndpointSet(format!("state endpoint set {:?} does not live in the state space", p.xi_x)));
    }
    if dim(&p.xi_t).is_some_and(|n| n != 1) {
        return Err(OptimalityError::UnsupportedEndpointSet(format!("time endpoint set {:?} is not one-dimensional", p.xi_t)));
    }
    Ok(())
}

/// Evaluates every condition of the discrete necessary-optimality system.
pub fn condition_residuals(p: &SweepingOCP, d: &DiscreteDecision, duals: &DualVariables, tol: f64) -> Result<ResidualReport, OptimalityError> {
    check_endpoint_sets(p)?;
    let aux = compute_auxiliary(p, d, duals)?;
    Ok(report_from(p, d, duals, &aux, tol))
}

fn report_from(p: &SweepingOCP, d: &DiscreteDecision, duals: &DualVariables, aux: &AuxiliaryQuantities, tol: f64) -> ResidualReport {
    let k = d.k();
    let defects = equation_defects(p, d, duals, aux);
    let transversality_xt = cone_distance(&endpoint_generators(p, d), &defects.transversality_xt);

    let mut slack_eta = 0.0;
    let mut slack_i1 = 0.0;
    let mut slack_i2 = 0.0;
    let mut orth = 0.0;
    for j in 0..k {
        let y = &d.x[j] - &d.u[j];
        let (values, grads) = active_gradients(p, &y);
        for i in 0..values.len() {
            let eta = duals.eta[j][i];
            let gamma = duals.gamma[j][i];
            let dir = grads[i].dot(&aux.lambda_j[j]);
            slack_eta += (-eta).max(0.0);
            if values[i] > INDEX_TOL {
                slack_eta += eta.abs();
            }
            let eta_zero = eta.abs() <= INDEX_TOL;
            if values[i] > INDEX_TOL || (eta_zero && dir > INDEX_TOL) {
                slack_i1 += gamma.abs();
            } else if values[i].abs() <= INDEX_TOL && eta_zero && dir < -INDEX_TOL {
                slack_i2 += (-gamma).max(0.0);
            }
            if eta > INDEX_TOL {
                orth += eta * dir.abs();
            }
        }
    }
    let yk = &d.x[k] - &d.u[k];
    let values_k = p.geometry.values(&yk);
    let slack_alpha = (0..values_k.len())
        .map(|i| (-duals.alpha[i]).max(0.0) + if values_k[i] > INDEX_TOL { duals.alpha[i].abs() } else { 0.0 })
        .sum();
    let cap = p.shift_set.lipschitz() * p.budget().delta_k;
    let mut psi_u_cone = 0.0;
    let mut psi_a_cone = 0.0;
    for j in 0..k {
        let nu = p.shift_set.values(&d.u[j]);
        for (i, &v) in nu.iter().enumerate() {
            let psi = duals.psi_u[j][i];
            psi_u_cone += (-psi).max(0.0);
            if v < cap - INDEX_TOL {
                psi_u_cone += psi.abs();
            }
        }
        psi_a_cone += p.control_set.normal_cone_distance(&d.a[j], &duals.psi_a[j]);
    }
    let margin = duals.enhanced_margin();
    ResidualReport {
        dynamics: max_norm(&defects.dynamics),
        adjoint_x: max_norm(&defects.adjoint_x),
        adjoint_u: max_norm(&defects.adjoint_u),
        adjoint_a: max_norm(&defects.adjoint_a),
        pu_link: max_norm(&defects.pu_link),
        transversality_u: defects.transversality_u.norm(),
        transversality_xt,
        slack_eta,
        slack_gamma_i1: slack_i1,
        slack_gamma_i2: slack_i2,
        slack_alpha,
        eta_orthogonality: orth,
        nontriviality: if duals.normalization() <= 1e-12 { 1.0 } else { 0.0 },
        enhanced_nontriviality: if margin <= 1e-12 { 1.0 } else { 0.0 },
        psi_u_cone,
        psi_a_cone,
        enhanced_margin: margin,
        tol,
    }
}

/// Settings for [`recover_duals`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryOptions {
    /// Outer active-set iterations of the sign-constrained solver.
    pub max_outer: usize,
    /// Pass threshold written into the report.
    pub tol: f64,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self { max_outer: 500, tol: 1e-6 }
    }
}

struct Layout {
    px: usize,
    pu0: usize,
    alpha: Vec<Option<usize>>,
    psi_u: Vec<Vec<Option<usize>>>,
    psi_a: Vec<Vec<(usize, Vector)>>,
    gamma: Vec<Vec<Option<usize>>>,
    endpoint: Vec<(usize, Vector)>,
    signs: Vec<VarSign>,
}

impl Layout {
    fn push(&mut self, s: VarSign) -> usize {
        self.signs.push(s);
        self.signs.len() - 1
    }
}

fn var_sign(s: GeneratorSign) -> VarSign {
    match s {
        GeneratorSign::Free => VarSign::Free,
        GeneratorSign::Nonnegative => VarSign::Nonnegative,
    }
}

/// Best-fit duals for a primal decision under the gauge `λ = 1`, rescaled to unit normalization.
///
/// `η` is fixed per cell by the dynamics equation; `p^u_{j+1}` for `j ≥ 0` is derived
/// from the link equation; the remaining duals solve a sparse sign-constrained
/// least-squares problem whose rows are the adjoint equations and the transversality
/// conditions, with slackness-forced zeros removed from the unknowns.
pub fn recover_duals(p: &SweepingOCP, d: &DiscreteDecision, opts: RecoveryOptions) -> Result<(DualVariables, ResidualReport), OptimalityError> {
    check_endpoint_sets(p)?;
    let k = d.k();
    let n = p.geometry.dim();
    let m = p.geometry.len();
    let s = p.shift_set.len();
    let dd = p.control_set.dim();
    let primal = primal_data(p, d);
    let h = primal.h;
    let sigma = p.sign.factor();

    let eta: Vec<Vector> = (0..k)
        .map(|j| {
            let y = &d.x[j] - &d.u[j];
            let w = d.x_quotient(j) - p.dynamics.value(&d.x[j], &d.a[j]) * sigma;
            cone_fit(&p.geometry, &y, &w).0
        })
        .collect();
    // Derived shift adjoints for j = 1..k under λ = 1.
    let pu_derived: Vec<Vector> = (0..k).map(|j| &primal.subgradients[j].ud + &primal.theta_u[j] / h).collect();

    let mut lay = Layout { px: 0, pu0: 0, alpha: vec![], psi_u: vec![], psi_a: vec![], gamma: vec![], endpoint: vec![], signs: vec![] };
    lay.px = lay.signs.len();
    lay.signs.extend(std::iter::repeat(VarSign::Free).take((k + 1) * n));
    lay.pu0 = lay.signs.len();
    lay.signs.extend(std::iter::repeat(VarSign::Free).take(n));
    let yk = &d.x[k] - &d.u[k];
    let values_k = p.geometry.values(&yk);
    lay.alpha = (0..m).map(|i| if values_k[i] <= INDEX_TOL { Some(lay.push(VarSign::Nonnegative)) } else { None }).collect();
    let cap = p.shift_set.lipschitz() * p.budget().delta_k;
    for j in 0..k {
        let nu = p.shift_set.values(&d.u[j]);
        let row = (0..s).map(|i| if nu[i] >= cap - INDEX_TOL { Some(lay.push(VarSign::Nonnegative)) } else { None }).collect();
        lay.psi_u.push(row);
        let gens = p.control_set.normal_cone_generators(&d.a[j]);
        let row = gens.into_iter().map(|(g, sg)| (lay.push(var_sign(sg)), g)).collect();
        lay.psi_a.push(row);
        let values = p.geometry.values(&(&d.x[j] - &d.u[j]));
        let row = (0..m).map(|i| if values[i] <= INDEX_TOL { Some(lay.push(VarSign::Free)) } else { None }).collect();
        lay.gamma.push(row);
    }
    for (g, sg) in endpoint_generators(p, d) {
        let idx = lay.push(var_sign(sg));
        lay.endpoint.push((idx, g));
    }

    let mut trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let px_col = |j: usize, r: usize| lay.px + j * n + r;
    for j in 0..k {
        let y = &d.x[j] - &d.u[j];
        let sub = &primal.subgradients[j];
        let jx = p.dynamics.jac_x(&d.x[j], &d.a[j]) * sigma;
        let ja = p.dynamics.jac_a(&d.x[j], &d.a[j]) * sigma;
        let hm = weighted_hessian(p, &y, &eta[j]);
        let grads: Vec<Vector> = p.geometry.constraints().iter().map(|g| g.gradient(&y)).collect();
        let c = &primal.theta_x[j] / h + &sub.xd;
        // State adjoint: (p_{j+1} − p_j)/h + (J_xᵀ + H) p_{j+1} + Σγ∇g = w^x + (J_xᵀ + H) c.
        let coupling = jx.transpose() + &hm;
        let base = rhs.len();
        let target = &sub.x + &coupling * &c;
        for r in 0..n {
            trip.push((base + r, px_col(j + 1, r), 1.0 / h));
            trip.push((base + r, px_col(j, r), -1.0 / h));
            for q in 0..n {
                if coupling[(r, q)] != 0.0 {
                    trip.push((base + r, px_col(j + 1, q), coupling[(r, q)]));
                }
            }
            for (i, col) in lay.gamma[j].iter().enumerate() {
                if let Some(cidx) = col {
                    trip.push((base + r, *cidx, grads[i][r]));
                }
            }
            rhs.push(target[r]);
        }
        // Shift adjoint: −[j=0] p^u_0/h − Σψ∇ν/h − H p_{j+1} − Σγ∇g = w^u − P_{j+1}/h + [j≥1] P_j/h − H c.
        let base = rhs.len();
        let mut target = &sub.u - &pu_derived[j] / h - &hm * &c;
        if j >= 1 {
            target += &pu_derived[j - 1] / h;
        }
        let nu_grads: Vec<Vector> = p.shift_set.functions().iter().map(|f| f.gradient(&d.u[j])).collect();
        for r in 0..n {
            if j == 0 {
                trip.push((base + r, lay.pu0 + r, -1.0 / h));
            }
            for (i, col) in lay.psi_u[j].iter().enumerate() {
                if let Some(cidx) = col {
                    trip.push((base + r, *cidx, -nu_grads[i][r] / h));
                }
            }
            for q in 0..n {
                if hm[(r, q)] != 0.0 {
                    trip.push((base + r, px_col(j + 1, q), -hm[(r, q)]));
                }
            }
            for (i, col) in lay.gamma[j].iter().enumerate() {
                if let Some(cidx) = col {
                    trip.push((base + r, *cidx, -grads[i][r]));
                }
            }
            rhs.push(target[r]);
        }
        // Control: J_aᵀ p_{j+1} − ψ^a/h = w^a + θ^a/h + J_aᵀ c.
        let base = rhs.len();
        let target = &sub.a + &primal.theta_a[j] / h + ja.transpose() * &c;
        for r in 0..dd {
            for q in 0..n {
                if ja[(q, r)] != 0.0 {
                    trip.push((base + r, px_col(j + 1, q), ja[(q, r)]));
                }
            }
            for (cidx, g) in &lay.psi_a[j] {
                if g[r] != 0.0 {
                    trip.push((base + r, *cidx, -g[r] / h));
                }
            }
            rhs.push(target[r]);
        }
    }
    // Terminal shift: Σα∇g(x_k − u_k) = −p^u_k.
    let grads_k: Vec<Vector> = p.geometry.constraints().iter().map(|g| g.gradient(&yk)).collect();
    let pu_k = pu_derived.last().cloned().unwrap_or_else(|| Vector::zeros(n));
    let base = rhs.len();
    for r in 0..n {
        for (i, col) in lay.alpha.iter().enumerate() {
            if let Some(cidx) = col {
                trip.push((base + r, *cidx, grads_k[i][r]));
            }
        }
        rhs.push(-pu_k[r]);
    }
    // Endpoint inclusion: (−p^x_k + Σα∇g, H̄ + (T̄ − T) + ϱ) − Σβ e_β = ∂φ.
    let (phi_x, phi_t) = p.terminal.subgradient(&d.x[k], d.horizon);
    let base = rhs.len();
    for r in 0..n {
        trip.push((base + r, px_col(k, r), -1.0));
        for (i, col) in lay.alpha.iter().enumerate() {
            if let Some(cidx) = col {
                trip.push((base + r, *cidx, grads_k[i][r]));
            }
        }
        for (cidx, g) in &lay.endpoint {
            if g[r] != 0.0 {
                trip.push((base + r, *cidx, -g[r]));
            }
        }
        rhs.push(phi_x[r]);
    }
    let trow = rhs.len();
    let kf = k as f64;
    let mut hbar_const = 0.0;
    for j in 0..k {
        let xq = d.x_quotient(j);
        for r in 0..n {
            if xq[r] != 0.0 {
                trip.push((trow, px_col(j + 1, r), xq[r] / kf));
            }
        }
        hbar_const += (pu_derived[j].dot(&d.u_quotient(j)) - primal.running[j]) / kf;
    }
    for (cidx, g) in &lay.endpoint {
        if g[n] != 0.0 {
            trip.push((trow, *cidx, -g[n]));
        }
    }
    rhs.push(phi_t - (p.t_bar() - d.horizon) - primal.varrho - hbar_const);

    let a = SparseMatrix::from_triplets(rhs.len(), lay.signs.len(), trip);
    let sol = sign_constrained_least_squares(&a, &rhs, &lay.signs, opts.max_outer);

    let mut duals = DualVariables::zeros(p, k);
    duals.lambda = 1.0;
    for j in 0..=k {
        duals.px[j] = Vector::from_fn(n, |r, _| sol[px_col(j, r)]);
    }
    duals.pu[0] = Vector::from_fn(n, |r, _| sol[lay.pu0 + r]);
    for j in 0..k {
        duals.pu[j + 1] = pu_derived[j].clone();
        for (i, col) in lay.psi_u[j].iter().enumerate() {
            if let Some(cidx) = col {
                duals.psi_u[j][i] = sol[*cidx];
            }
        }
        for (cidx, g) in &lay.psi_a[j] {
            duals.psi_a[j] += g * sol[*cidx];
        }
        for (i, col) in lay.gamma[j].iter().enumerate() {
            if let Some(cidx) = col {
                duals.gamma[j][i] = sol[*cidx];
            }
        }
    }
    for (i, col) in lay.alpha.iter().enumerate() {
        if let Some(cidx) = col {
            duals.alpha[i] = sol[*cidx];
        }
    }
    duals.eta = eta;
    let norm = duals.normalization();
    let duals = duals.scaled(1.0 / norm);
    let aux = auxiliary_from(p, d, &duals, primal)?;
    let report = report_from(p, d, &duals, &aux, opts.tol);
    Ok((duals, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximation::ReferenceSolution;
    use crate::controls::{ControlSetA, ControlSetU};
    use crate::dynamics::{PerturbationMap, Sign};
    use crate::geometry::{ConstraintSet, GeometryConstants, SmoothConstraint};
    use crate::ocp::{ControlEnergy, EndpointSet, ProgressTerminal, ZeroRunning, ZeroTerminal};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn v(x: &[f64]) -> Vector {
        Vector::from_vec(x.to_vec())
    }

    // One agent moving freely on a line toward a wall it never reaches:
    // ẋ = s·a, ℓ = ½a², φ = −x + τT. At the reference a ≡ 1 the duals are
    // p^x = λ/s constant, p^u = 0, α = 0 and H̄ = λ(s·p − ½) = λ/2 = λτ with τ = ½.
    fn line_problem(k: usize) -> (SweepingOCP, DiscreteDecision) {
        let horizon = 2.0;
        let s = 1.0;
        let times: Vec<f64> = (0..=k).map(|j| j as f64 * horizon / k as f64).collect();
        let x_nodes: Vec<Vector> = times.iter().map(|t| v(&[s * t])).collect();
        let u_nodes = vec![v(&[0.0]); k + 1];
        let a_cells = vec![v(&[1.0]); k];
        let reference = ReferenceSolution::piecewise_linear(times, x_nodes.clone(), u_nodes.clone(), a_cells.clone(), 1.0).unwrap();
        let geometry = ConstraintSet::new(vec![SmoothConstraint::affine(v(&[-1.0]), 100.0)], GeometryConstants { m1: 1.0, m2: 1.0, m3: 0.0, beta: 1.0, rho: 1.0, c: 1e6 }).unwrap();
        let p = SweepingOCP {
            geometry,
            dynamics: PerturbationMap::control_scaled(v(&[s]), 1.0),
            sign: Sign::Plus,
            shift_set: ControlSetU::unconstrained(),
            control_set: ControlSetA::Unconstrained { dim: 1 },
            terminal: Arc::new(ProgressTerminal { target: v(&[0.0]), tau: 0.5 }),
            running: Arc::new(ControlEnergy),
            xi_x: EndpointSet::AllSpace,
            xi_t: EndpointSet::HalfLine { lower: 0.0 },
            reference,
            x0: v(&[0.0]),
            epsilon: 10.0,
            k,
            quadrature_points: 4,
        };
        let d = DiscreteDecision { x: x_nodes, u: u_nodes, a: a_cells, horizon };
        (p, d)
    }

    fn hand_duals(p: &SweepingOCP, k: usize, lambda: f64) -> DualVariables {
        let mut duals = DualVariables::zeros(p, k);
        duals.lambda = lambda;
        duals.px = vec![v(&[lambda]); k + 1];
        duals
    }

    #[test]
    fn reference_primal_has_vanishing_theta_and_varrho() {
        let (p, d) = line_problem(10);
        let data = primal_data(&p, &d);
        assert!(data.theta_x.iter().chain(&data.theta_u).chain(&data.theta_a).all(|t| t.norm() < 1e-14));
        assert!(data.varrho.abs() < 1e-14);
    }

    #[test]
    fn hamiltonian_matches_time_weight() {
        let (p, d) = line_problem(10);
        let aux = compute_auxiliary(&p, &d, &hand_duals(&p, 10, 0.3)).unwrap();
        assert!((aux.hbar - 0.3 * 0.5).abs() < 1e-14);
        assert!(aux.xi.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn hand_built_duals_satisfy_all_conditions() {
        let (p, d) = line_problem(10);
        let r = condition_residuals(&p, &d, &hand_duals(&p, 10, 0.3), 1e-10).unwrap();
        assert!(r.passes(), "{:?}", r.failing());
    }

    #[test]
    fn zero_duals_flag_nontriviality() {
        let (p, d) = line_problem(6);
        let r = condition_residuals(&p, &d, &DualVariables::zeros(&p, 6), 1e-10).unwrap();
        assert_eq!(r.nontriviality, 1.0);
        assert_eq!(r.enhanced_nontriviality, 1.0);
        assert_eq!(r.failing(), vec!["nontriviality", "enhanced_nontriviality"]);
    }

    #[test]
    fn single_adjoint_perturbation_is_linear_in_step() {
        let k = 8;
        let (p, d) = line_problem(k);
        let mut duals = hand_duals(&p, k, 0.3);
        duals.px[3][0] += 1e-3;
        let r = condition_residuals(&p, &d, &duals, 1e-10).unwrap();
        let h = d.h();
        // p_3 enters two adjoint equations: as p_{j+1} (coefficient 1/h + J_x = 1/h) and as p_j (−1/h).
        assert!((r.adjoint_x - 1e-3 / h).abs() < 1e-12);
    }

    #[test]
    fn recovered_duals_match_hand_family() {
        let k = 10;
        let (p, d) = line_problem(k);
        let (duals, r) = recover_duals(&p, &d, RecoveryOptions::default()).unwrap();
        assert!(r.total() <= 1e-8, "{r:?}");
        assert!((duals.normalization() - 1.0).abs() < 1e-12);
        let expected = 1.0 / (1.0 + (k + 1) as f64);
        assert!((duals.lambda - expected).abs() < 1e-9);
        assert!(duals.px.iter().all(|q| (q[0] - expected).abs() < 1e-9));
    }

    #[test]
    fn non_optimal_primal_is_flagged() {
        let k = 10;
        let (p, mut d) = line_problem(k);
        for a in d.a.iter_mut() {
            a[0] *= 1.1;
        }
        for j in 0..=k {
            d.x[j][0] = 1.1 * d.time(j);
        }
        let (_, r) = recover_duals(&p, &d, RecoveryOptions::default()).unwrap();
        assert!(r.total() >= 1e-3, "{r:?}");
    }

    #[test]
    fn degenerate_objective_reports_its_fit() {
        let (mut p, d) = line_problem(5);
        p.terminal = Arc::new(ZeroTerminal);
        p.running = Arc::new(ZeroRunning);
        let (duals, r) = recover_duals(&p, &d, RecoveryOptions::default()).unwrap();
        // With no cost and free endpoints the adjoints vanish; normalization is carried by λ alone.
        assert!((duals.lambda - 1.0).abs() < 1e-9);
        assert!(duals.px.iter().all(|q| q.norm() < 1e-9));
        assert!(r.passes(), "{:?}", r.failing());
    }

    #[test]
    fn adjoint_equation_telescopes() {
        let k = 7;
        let (p, d) = line_problem(k);
        let mut duals = hand_duals(&p, k, 0.4);
        for (j, q) in duals.px.iter_mut().enumerate() {
            q[0] += 0.01 * (j as f64).sin();
        }
        duals.gamma = (0..k).map(|j| v(&[0.1 * j as f64])).collect();
        let aux = compute_auxiliary(&p, &d, &duals).unwrap();
        let defects = equation_defects(&p, &d, &duals, &aux);
        let h = d.h();
        // Independent right-hand side: λw^x − J_xᵀΛ − ξ − Σγ∇g with J_x = 0, ξ = 0, ∇g = −1.
        let rhs_sum: f64 = (0..k).map(|j| 0.0 - (duals.gamma[j][0] * -1.0)).sum();
        let lhs: f64 = defects.adjoint_x.iter().map(|e| e[0]).sum::<f64>() * h;
        assert!((lhs - ((duals.px[k][0] - duals.px[0][0]) - h * rhs_sum)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn equation_residuals_are_homogeneous(scale in 0.01f64..100.0, bump in -0.5f64..0.5) {
            let k = 6;
            let (p, d) = line_problem(k);
            let mut duals = hand_duals(&p, k, 0.7);
            duals.px[2][0] += bump;
            duals.pu[4][0] -= bump;
            duals.alpha[0] = bump.abs();
            let r1 = condition_residuals(&p, &d, &duals, 1e-10).unwrap();
            let r2 = condition_residuals(&p, &d, &duals.scaled(scale), 1e-10).unwrap();
            for ((name, a), (_, b)) in r1.equation_entries().into_iter().zip(r2.equation_entries()) {
                prop_assert!((b - scale * a).abs() <= 1e-12 * (1.0 + scale * a.abs()).max(1.0) * 10.0, "{name}: {a} vs {b}");
            }
        }
    }
}
