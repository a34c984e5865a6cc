//! Two agents walking towards an exit along a corridor: closed-form optimum,
//! tabulated values, simulation and verification of the dual conditions.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::approximation::{ApproximationError, ReferenceSolution};
use crate::controls::{ControlSetA, ControlSetU};
use crate::dynamics::{catching_up_simulate, cone_fit, ControlSignal, DynamicsError, PerturbationMap, Sign, Trajectory};
use crate::geometry::{ConstraintSet, GeometryConstants, GeometryError, SmoothConstraint};
use crate::linalg::Vector;
use crate::ocp::{ControlEnergy, DiscreteDecision, EndpointSet, OcpError, ProgressTerminal, SweepingOCP};
use crate::optimality::{condition_residuals, DualVariables, OptimalityError, ResidualReport};

/// Localization radius used for the corridor problem.
pub const CORRIDOR_EPSILON: f64 = 1e3;

/// Gap below which the agents count as touching.
pub const CONTACT_TOL: f64 = 1e-9;

/// Errors of the corridor model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrowdError {
    #[error("invalid corridor configuration: {0}")]
    InvalidConfig(String),
    #[error("contact time {t_contact} is not inside (0, {t_opt}); the closed form does not apply")]
    NoContactRegime { t_contact: f64, t_opt: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Approximation(#[from] ApproximationError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Optimality(#[from] OptimalityError),
}

/// Corridor data: exit `x_dest`, agent abscissae, radii and time weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorridorConfig {
    pub x_dest: f64,
    pub x1_init: f64,
    pub x2_init: f64,
    pub l1: f64,
    pub l2: f64,
    pub tau: f64,
    /// Uncontrolled speeds `s_i`; `None` takes `s_i = ā_i`.
    pub speeds: Option<[f64; 2]>,
}

impl CorridorConfig {
    /// The reference instance: exit at 0, agents at −48 and −24, radii 3.
    pub fn standard(tau: f64) -> Self {
        Self { x_dest: 0.0, x1_init: -48.0, x2_init: -24.0, l1: 3.0, l2: 3.0, tau, speeds: None }
    }

    /// Remaining distances `(Λ₁, Λ₂)`.
    pub fn distances(&self) -> (f64, f64) {
        (self.x_dest - self.x1_init, self.x_dest - self.x2_init)
    }

    /// Checks ordering, radii, `τ > 0` and `Λ₁ > Λ₂ > 0`.
    pub fn validate(&self) -> Result<(), CrowdError> {
        let all = [self.x_dest, self.x1_init, self.x2_init, self.l1, self.l2, self.tau];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(CrowdError::InvalidConfig("every field must be finite".into()));
        }
        if !(self.tau > 0.0) {
            return Err(CrowdError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.l1 > 0.0 && self.l2 > 0.0) {
            return Err(CrowdError::InvalidConfig("radii must be positive".into()));
        }
        if !(self.x1_init < self.x2_init) {
            return Err(CrowdError::InvalidConfig("agent 1 must start behind agent 2".into()));
        }
        if self.x2_init - self.x1_init < self.l1 + self.l2 {
            return Err(CrowdError::InvalidConfig("agents overlap at the start".into()));
        }
        let (d1, d2) = self.distances();
        if !(d1 > d2 && d2 > 0.0) {
            return Err(CrowdError::InvalidConfig("both agents must start before the exit".into()));
        }
        if let Some(s) = self.speeds {
            if !(s[0] > 0.0 && s[1] > 0.0 && s[0].is_finite() && s[1].is_finite()) {
                return Err(CrowdError::InvalidConfig("speeds must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Closed-form optimum of the corridor problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormSolution {
    pub t_opt: f64,
    pub a1: f64,
    pub a2: f64,
    pub t_contact: f64,
    pub cost: f64,
    pub s1: f64,
    pub s2: f64,
    pub sb1: f64,
    pub sb2: f64,
    pub s_after: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Initial free gap `Λ₁ − Λ₂ − (L₁ + L₂)`.
    pub lambda: f64,
    /// True when `0 < t_contact < t_opt`.
    pub contact_regime: bool,
}

impl ClosedFormSolution {
    /// Errors unless the contact happens strictly inside the horizon.
    pub fn require_contact(&self) -> Result<(), CrowdError> {
        if self.contact_regime {
            Ok(())
        } else {
            Err(CrowdError::NoContactRegime { t_contact: self.t_contact, t_opt: self.t_opt })
        }
    }
}

/// Optimal horizon, controls, contact time and speeds.
pub fn closed_form_solve(cfg: &CorridorConfig) -> Result<ClosedFormSolution, CrowdError> {
    cfg.validate()?;
    let (l1, l2) = cfg.distances();
    let lambda = l1 - l2 - (cfg.l1 + cfg.l2);
    let t_opt = ((l1 * l1 + l2 * l2) / (2.0 * cfg.tau)).sqrt();
    let (a1, a2) = (l1 / t_opt, l2 / t_opt);
    let [s1, s2] = cfg.speeds.unwrap_or([a1, a2]);
    let (sb1, sb2) = (a1 * s1, a2 * s2);
    // The gap closes at rate sb1 − sb2 until it reaches the sum of radii.
    let t_contact = if sb1 > sb2 { lambda / (sb1 - sb2) } else { f64::INFINITY };
    Ok(ClosedFormSolution {
        t_opt,
        a1,
        a2,
        t_contact,
        cost: l1 + l2,
        s1,
        s2,
        sb1,
        sb2,
        s_after: 0.5 * (sb1 + sb2),
        lambda1: l1,
        lambda2: l2,
        lambda,
        contact_regime: t_contact > 0.0 && t_contact < t_opt,
    })
}

/// Printed values `(τ, ā₁, ā₂, s^b₁, s^b₂, s, T̄, t*)` of the published table.
pub const TABLE1: [[&str; 8]; 10] = [
    ["1", "1.26", "0.63", "1.6", "0.4", "1", "37.94", "15"],
    ["2", "1.78", "0.89", "3.2", "0.8", "2", "26.83", "7.5"],
    ["3", "2.19", "1.09", "4.8", "1.2", "3", "21.9", "5"],
    ["4", "2.52", "1.26", "6.4", "1.6", "4", "18.97", "3.75"],
    ["5", "2.82", "1.41", "8", "2", "5", "16.97", "3"],
    ["6", "3.09", "1.54", "9.6", "2.4", "6", "15.49", "2.5"],
    ["7", "3.34", "1.67", "11.2", "2.8", "7", "14.34", "2.14"],
    ["8", "3.57", "1.78", "12.8", "3.2", "8", "13.41", "1.875"],
    ["9", "3.79", "1.89", "14.4", "3.6", "9", "12.64", "1.66"],
    ["10", "4", "2", "16", "4", "10", "12", "1.5"],
];

/// Column names of a table row after `τ`.
pub const TABLE1_COLUMNS: [&str; 7] = ["a1", "a2", "sb1", "sb2", "s", "T", "t_contact"];

/// Whether `value` agrees with `printed` when cut to the printed number of decimals.
pub fn matches_printed(value: f64, printed: &str) -> bool {
    let decimals = printed.split_once('.').map_or(0, |(_, frac)| frac.len()) as i32;
    let Ok(expected) = printed.parse::<f64>() else { return false };
    let scale = 10f64.powi(decimals);
    let scaled = value * scale;
    let cut = (scaled + 1e-9 * scaled.abs().max(1.0)).floor();
    (cut - (expected * scale).round()).abs() < 0.5
}

/// One computed table row with its comparison against the printed values.
#[derive(Debug, Clone, PartialEq)]
pub struct Table1Row {
    pub tau: f64,
    /// `(ā₁, ā₂, s^b₁, s^b₂, s, T̄, t*)`.
    pub values: [f64; 7],
    /// Printed values for this `τ`, if it appears in the table.
    pub printed: Option<[&'static str; 7]>,
    /// Columns whose value disagrees with the printed one.
    pub mismatches: Vec<&'static str>,
}

impl Table1Row {
    /// True when the row is tabulated and every column agrees.
    pub fn matches(&self) -> bool {
        self.printed.is_some() && self.mismatches.is_empty()
    }
}

fn printed_row(tau: f64) -> Option<[&'static str; 7]> {
    TABLE1.iter().find(|r| r[0].parse::<f64>().ok() == Some(tau)).map(|r| {
        let mut out = [""; 7];
        out.copy_from_slice(&r[1..]);
        out
    })
}

/// Computes the table rows for each `τ` (in parallel) from a base configuration.
pub fn table1(base: &CorridorConfig, taus: &[f64]) -> Result<Vec<Table1Row>, CrowdError> {
    taus.par_iter()
        .map(|&tau| {
            let sol = closed_form_solve(&CorridorConfig { tau, ..*base })?;
            let values = [sol.a1, sol.a2, sol.sb1, sol.sb2, sol.s_after, sol.t_opt, sol.t_contact];
            let printed = printed_row(tau);
            let mismatches = match printed {
                Some(p) => (0..7).filter(|&i| !matches_printed(values[i], p[i])).map(|i| TABLE1_COLUMNS[i]).collect(),
                None => Vec::new(),
            };
            Ok(Table1Row { tau, values, printed, mismatches })
        })
        .collect()
}

/// The default `τ = 1, …, 10`.
pub fn table1_taus() -> Vec<f64> {
    (1..=10).map(f64::from).collect()
}

fn v2(a: f64, b: f64) -> Vector {
    Vector::from_vec(vec![a, b])
}

/// The non-overlap constraint `x₂ − x₁ − (L₁ + L₂) ≥ 0` in reduced coordinates.
pub fn corridor_geometry(cfg: &CorridorConfig) -> Result<ConstraintSet, CrowdError> {
    let g = SmoothConstraint::affine(v2(-1.0, 1.0), -(cfg.l1 + cfg.l2)).with_label("gap");
    let r2 = std::f64::consts::SQRT_2;
    let constants = GeometryConstants { m1: r2, m2: r2, m3: 0.0, beta: r2, rho: 1.0, c: 1e6 };
    Ok(ConstraintSet::new(vec![g], constants)?)
}

/// The closed-form optimal path: knots at `0`, `t*` and `T̄`, with `u ≡ 0`.
pub fn optimal_reference(cfg: &CorridorConfig) -> Result<ReferenceSolution, CrowdError> {
    let sol = closed_form_solve(cfg)?;
    sol.require_contact()?;
    let x0 = v2(cfg.x1_init, cfg.x2_init);
    let xc = &x0 + v2(sol.sb1, sol.sb2) * sol.t_contact;
    let xt = &xc + v2(1.0, 1.0) * (sol.s_after * (sol.t_opt - sol.t_contact));
    let a = v2(sol.a1, sol.a2);
    let zero = Vector::zeros(2);
    Ok(ReferenceSolution::piecewise_linear(
        vec![0.0, sol.t_contact, sol.t_opt],
        vec![x0, xc, xt],
        vec![zero.clone(), zero.clone(), zero],
        vec![a.clone(), a],
        1.0,
    )?)
}

/// The corridor problem on `k` cells and the starting decision `a ≡ 1`, `T = 30`.
pub fn build_ocp(cfg: &CorridorConfig, k: usize) -> Result<(SweepingOCP, DiscreteDecision), CrowdError> {
    if k < 2 {
        return Err(CrowdError::InvalidConfig(format!("k must be at least 2, got {k}")));
    }
    let sol = closed_form_solve(cfg)?;
    let geometry = corridor_geometry(cfg)?;
    let dynamics = PerturbationMap::control_scaled(v2(sol.s1, sol.s2), v2(sol.sb1, sol.sb2).norm());
    let problem = SweepingOCP {
        geometry,
        dynamics,
        sign: Sign::Plus,
        shift_set: ControlSetU::unconstrained(),
        control_set: ControlSetA::Unconstrained { dim: 2 },
        terminal: Arc::new(ProgressTerminal { target: v2(cfg.x_dest, cfg.x_dest), tau: cfg.tau }),
        running: Arc::new(ControlEnergy),
        xi_x: EndpointSet::AllSpace,
        xi_t: EndpointSet::HalfLine { lower: 0.0 },
        reference: optimal_reference(cfg)?,
        x0: v2(cfg.x1_init, cfg.x2_init),
        epsilon: CORRIDOR_EPSILON,
        k,
        quadrature_points: 4,
    };
    problem.validate()?;
    let init = simulate_decision(&problem, v2(1.0, 1.0), 30.0)?;
    Ok((problem, init))
}

fn simulate_decision(p: &SweepingOCP, a: Vector, horizon: f64) -> Result<DiscreteDecision, CrowdError> {
    let traj = simulate_constant(p, a, horizon)?;
    Ok(DiscreteDecision { x: traj.states, u: traj.shifts, a: traj.controls, horizon })
}

fn simulate_constant(p: &SweepingOCP, a: Vector, horizon: f64) -> Result<Trajectory, CrowdError> {
    let ctrl = ControlSignal::constant(Vector::zeros(2), a, horizon, p.k)?;
    Ok(catching_up_simulate(&p.geometry, &p.dynamics, &ctrl, &p.x0, p.k, p.sign)?)
}

/// First mesh index at which the gap has closed.
pub fn contact_index(cfg: &CorridorConfig, traj: &Trajectory) -> Option<usize> {
    let sum = cfg.l1 + cfg.l2;
    traj.states.iter().position(|x| x[1] - x[0] - sum <= CONTACT_TOL)
}

/// Catching-up simulation under the closed-form controls on `[0, T̄]`.
#[derive(Debug, Clone)]
pub struct CorridorSimulation {
    pub solution: ClosedFormSolution,
    pub trajectory: Trajectory,
    /// First index with the agents in contact.
    pub contact_index: Option<usize>,
    /// Smallest `x₂ − x₁` along the path.
    pub min_gap: f64,
}

/// Simulates the corridor on `k` cells with the optimal controls.
pub fn simulate_optimal(cfg: &CorridorConfig, k: usize) -> Result<CorridorSimulation, CrowdError> {
    let (p, _) = build_ocp(cfg, k)?;
    let solution = closed_form_solve(cfg)?;
    let trajectory = simulate_constant(&p, v2(solution.a1, solution.a2), solution.t_opt)?;
    let min_gap = trajectory.states.iter().map(|x| x[1] - x[0]).fold(f64::INFINITY, f64::min);
    let contact_index = contact_index(cfg, &trajectory);
    Ok(CorridorSimulation { solution, trajectory, contact_index, min_gap })
}

/// Embeds reduced states `(x₁, x₂)` as planar positions `(x₁, 0, x₂, 0)`.
pub fn embed_planar(x: &Vector) -> Vector {
    Vector::from_vec(vec![x[0], 0.0, x[1], 0.0])
}

/// A discrete primal with matching problem and dual family, ready for checking.
#[derive(Debug, Clone)]
pub struct CorridorCertificate {
    pub problem: SweepingOCP,
    pub decision: DiscreteDecision,
    pub duals: DualVariables,
    /// Mesh index at which the optimal path reaches contact.
    pub contact_node: usize,
}

/// Builds the discrete optimum on a mesh through `t*` and its dual family.
///
/// The controls are the closed-form ones multiplied componentwise by
/// `control_scale`; the horizon is `t*·k/j₀` with `j₀` the node nearest to
/// `t*`, and the localization reference is the primal itself.
pub fn corridor_certificate(cfg: &CorridorConfig, k: usize, control_scale: [f64; 2]) -> Result<CorridorCertificate, CrowdError> {
    let (mut problem, _) = build_ocp(cfg, k)?;
    let sol = closed_form_solve(cfg)?;
    sol.require_contact()?;
    let contact_node = ((sol.t_contact * k as f64 / sol.t_opt).round() as usize).clamp(1, k - 1);
    let horizon = sol.t_contact * k as f64 / contact_node as f64;
    let a = v2(sol.a1 * control_scale[0], sol.a2 * control_scale[1]);
    let traj = simulate_constant(&problem, a, horizon)?;
    let decision = DiscreteDecision { x: traj.states.clone(), u: traj.shifts.clone(), a: traj.controls.clone(), horizon };
    let times: Vec<f64> = (0..=k).map(|j| decision.time(j)).collect();
    problem.reference = ReferenceSolution::piecewise_linear(times, traj.states, traj.shifts, traj.controls, 1.0)?;

    let speeds = v2(sol.s1, sol.s2);
    let mut duals = DualVariables::zeros(&problem, k);
    duals.lambda = 1.0;
    for j in 0..k {
        duals.px[j + 1] = decision.a[j].component_div(&speeds);
        let w = decision.x_quotient(j) - problem.dynamics.value(&decision.x[j], &decision.a[j]) * problem.sign.factor();
        duals.eta[j] = cone_fit(&problem.geometry, &(&decision.x[j] - &decision.u[j]), &w).0;
    }
    duals.px[0] = duals.px[1].clone();
    Ok(CorridorCertificate { problem, decision, duals, contact_node })
}

/// Residuals of the necessary conditions at the discrete corridor optimum.
pub fn verify_conditions(cfg: &CorridorConfig, k: usize, tol: f64) -> Result<ResidualReport, CrowdError> {
    verify_perturbed(cfg, k, tol, [1.0, 1.0])
}

/// [`verify_conditions`] with the controls scaled componentwise by `control_scale`.
pub fn verify_perturbed(cfg: &CorridorConfig, k: usize, tol: f64, control_scale: [f64; 2]) -> Result<ResidualReport, CrowdError> {
    let c = corridor_certificate(cfg, k, control_scale)?;
    Ok(condition_residuals(&c.problem, &c.decision, &c.duals, tol)?)
}

/// Largest residual in a report.
pub fn max_residual(report: &ResidualReport) -> f64 {
    report.entries().iter().map(|(_, r)| *r).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::cost_jk;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn standard_instance_values() {
        let s = closed_form_solve(&CorridorConfig::standard(1.0)).unwrap();
        assert!(close(s.t_opt, 1440f64.sqrt(), 1e-14));
        assert!(close(s.t_contact, 15.0, 1e-12));
        assert!(close(s.sb1, 1.6, 1e-12) && close(s.sb2, 0.4, 1e-12));
        assert!(close(s.s_after, 1.0, 1e-12));
        assert_eq!(s.cost, 72.0);
        assert!(s.contact_regime);
        let s10 = closed_form_solve(&CorridorConfig::standard(10.0)).unwrap();
        assert!(close(s10.t_opt, 12.0, 1e-12) && close(s10.a1, 4.0, 1e-12) && close(s10.a2, 2.0, 1e-12));
        assert!(close(s10.t_contact, 1.5, 1e-12));
    }

    #[test]
    fn printed_comparison_truncates() {
        assert!(matches_printed(3.0984, "3.09"));
        assert!(!matches_printed(3.0984, "3.10"));
        assert!(matches_printed(1.875, "1.875"));
        assert!(matches_printed(1.4999999999999998, "1.5"));
        assert!(matches_printed(15.0, "15"));
        assert!(!matches_printed(15.0, "16"));
    }

    #[test]
    fn table_rows_all_match() {
        let rows = table1(&CorridorConfig::standard(1.0), &table1_taus()).unwrap();
        for r in &rows {
            assert!(r.matches(), "tau {} mismatches {:?}", r.tau, r.mismatches);
        }
    }

    #[test]
    fn table_is_monotone_in_tau() {
        let rows = table1(&CorridorConfig::standard(1.0), &table1_taus()).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].values[5] < w[0].values[5]);
            assert!(w[1].values[6] < w[0].values[6]);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = CorridorConfig::standard(-1.0);
        assert!(closed_form_solve(&c).is_err());
        c.tau = 1.0;
        c.x2_init = -46.0;
        assert!(closed_form_solve(&c).is_err());
        c = CorridorConfig::standard(1.0);
        c.x_dest = -30.0;
        assert!(closed_form_solve(&c).is_err());
    }

    #[test]
    fn small_time_weight_has_no_contact() {
        let c = CorridorConfig::standard(0.1);
        let s = closed_form_solve(&c).unwrap();
        assert!(!s.contact_regime);
        assert!(matches!(verify_conditions(&c, 50, 1e-6), Err(CrowdError::NoContactRegime { .. })));
    }

    #[test]
    fn terminal_gradient_pattern() {
        let (p, _) = build_ocp(&CorridorConfig::standard(1.0), 10).unwrap();
        let (gx, gt) = p.terminal.subgradient(&v2(-5.0, 2.0), 30.0);
        assert_eq!((gx, gt), (v2(-1.0, -1.0), 1.0));
    }

    #[test]
    fn simulation_matches_closed_form() {
        let k = 2000;
        let sim = simulate_optimal(&CorridorConfig::standard(1.0), k).unwrap();
        let h = sim.trajectory.step();
        assert!(sim.min_gap >= 6.0 - 1e-9);
        let j0 = sim.contact_index.unwrap();
        assert!((sim.trajectory.times[j0] - 15.0).abs() <= 2.0 * h);
        let rate = (sim.solution.sb1 - sim.solution.sb2).abs();
        for x in &sim.trajectory.states[j0..] {
            assert!((x[1] - x[0] - 6.0).abs() <= 2.0 * h * rate);
        }
    }

    #[test]
    fn closed_form_cost_is_close_to_seventy_two() {
        let cfg = CorridorConfig::standard(1.0);
        let k = 2000;
        let sim = simulate_optimal(&cfg, k).unwrap();
        let (p, _) = build_ocp(&cfg, k).unwrap();
        let t = sim.trajectory;
        let d = DiscreteDecision { x: t.states, u: t.shifts, a: t.controls, horizon: sim.solution.t_opt };
        let (cost, _) = cost_jk(&p, &d, p.t_bar(), p.reference.mu()).unwrap();
        assert!((cost - 72.0).abs() <= 0.5, "cost {cost}");
    }

    #[test]
    fn dual_family_satisfies_conditions() {
        for tau in [1.0, 2.0, 5.0] {
            let r = verify_conditions(&CorridorConfig::standard(tau), 200, 1e-6).unwrap();
            assert!(r.passes(), "tau {tau}: {:?}", r.failing());
        }
    }

    #[test]
    fn perturbed_controls_are_separated() {
        let r = verify_perturbed(&CorridorConfig::standard(1.0), 200, 1e-6, [1.1, 1.0]).unwrap();
        assert!(max_residual(&r) >= 1e-3);
    }

    #[test]
    fn post_contact_multiplier_equalizes_velocities() {
        let c = corridor_certificate(&CorridorConfig::standard(1.0), 200, [1.0, 1.0]).unwrap();
        let j = c.contact_node + 3;
        assert!((c.duals.eta[j][0] - 0.6).abs() < 1e-9);
        assert!(c.duals.eta[..c.contact_node].iter().all(|e| e[0] == 0.0));
    }

    fn contact_config() -> impl Strategy<Value = CorridorConfig> {
        (-50.0..50.0f64, 1.0..40.0f64, 0.1..5.0f64, 0.1..5.0f64, 0.05..20.0f64, 0.05..40.0f64).prop_map(
            |(xd, d2, l1, l2, tau, extra)| CorridorConfig {
                x_dest: xd,
                x2_init: xd - d2,
                x1_init: xd - d2 - (l1 + l2) - extra,
                l1,
                l2,
                tau,
                speeds: None,
            },
        )
    }

    proptest! {
        #[test]
        fn closed_form_identities(cfg in contact_config()) {
            let s = closed_form_solve(&cfg).unwrap();
            let tol = 1e-12;
            prop_assert!(close(s.cost, s.lambda1 + s.lambda2, tol));
            prop_assert!(close(s.s_after, cfg.tau, tol));
            prop_assert!(close(s.sb1, s.a1 * s.a1, tol) && close(s.sb2, s.a2 * s.a2, tol));
            let lhs = s.t_contact * (s.lambda1.powi(2) - s.lambda2.powi(2));
            prop_assert!(close(lhs, s.t_opt.powi(2) * s.lambda, tol));
            prop_assert!(close(s.a1 / s.s1 + s.a2 / s.s2, 2.0, tol));
        }

        #[test]
        fn tau_scaling(cfg in contact_config(), c in 0.1..10.0f64) {
            let s = closed_form_solve(&cfg).unwrap();
            let t = closed_form_solve(&CorridorConfig { tau: cfg.tau * c, ..cfg }).unwrap();
            prop_assert!(close(t.a1, s.a1 * c.sqrt(), 1e-12));
            prop_assert!(close(t.t_opt, s.t_opt / c.sqrt(), 1e-12));
            prop_assert!(close(t.cost, s.cost, 1e-15));
        }
    }
}
