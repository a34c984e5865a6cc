//! Local solver for the discrete problem by single shooting: states are
//! eliminated by the catching-up simulator and the controls and horizon are
//! updated by projected gradient steps with finite-difference gradients.

use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{catching_up_simulate, ControlSignal, DynamicsError};
use crate::linalg::Vector;
use crate::ocp::{check_constraints, cost_jk, DiscreteDecision, FeasibilityReport, OcpError, SweepingOCP};

/// Errors raised before the descent starts.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShootingError {
    #[error("initial decision is infeasible: {0}")]
    InfeasibleInit(String),
    #[error(transparent)]
    Simulation(#[from] DynamicsError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShootingOptions {
    /// Iteration cap.
    pub max_iters: usize,
    /// Projected-gradient tolerance; `None` means `1e-6·(1 + |J|)`.
    pub gtol: Option<f64>,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Maximum number of step halvings per line search.
    pub max_halvings: usize,
    /// Lower bound on the horizon; `None` means `1e-6·k`.
    pub t_lo: Option<f64>,
    /// Whether the shift nodes `u_1..u_k` are decision variables.
    pub optimize_shift: bool,
    /// First trial step length.
    pub initial_step: f64,
    /// Feasibility tolerance for the initial decision.
    pub init_tol: f64,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            gtol: None,
            fd_step: 1e-6,
            armijo: 1e-4,
            max_halvings: 40,
            t_lo: None,
            optimize_shift: true,
            initial_step: 1.0,
            init_tol: 1e-4,
        }
    }
}

/// How the descent ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShootingStatus {
    /// Projected-gradient norm fell below the tolerance.
    Converged,
    /// Iteration cap reached.
    MaxIterations,
    /// No step length gave sufficient decrease.
    LineSearchStall,
    /// Every shortened step that decreased the cost left the localization neighbourhood.
    LocalizationViolated,
}

/// One accepted iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    /// Iteration index (0 is the initial point).
    pub iter: usize,
    /// Objective value.
    pub cost: f64,
    /// Projected-gradient norm at this iterate.
    pub gnorm: f64,
    /// Horizon `T`.
    pub horizon: f64,
}

/// Result of [`solve_shooting`].
#[derive(Debug, Clone)]
pub struct ShootingResult {
    /// Best decision found.
    pub best: DiscreteDecision,
    /// Its objective value.
    pub cost: f64,
    /// Accepted iterates.
    pub history: Vec<HistoryEntry>,
    /// Termination reason.
    pub status: ShootingStatus,
    /// Constraint residuals of the returned decision.
    pub feasibility: FeasibilityReport,
}

struct Shooter<'a> {
    problem: &'a SweepingOCP,
    opts: ShootingOptions,
    u0: Vector,
    t_lo: f64,
    t_hi: f64,
    mu_tilde: f64,
    u_slack: f64,
}

impl<'a> Shooter<'a> {
    fn new(problem: &'a SweepingOCP, opts: ShootingOptions) -> Self {
        let budget = problem.budget();
        let t_lo = opts.t_lo.unwrap_or(1e-6 * problem.k as f64);
        Self {
            problem,
            opts,
            u0: problem.reference.u(0.0),
            t_lo,
            t_hi: problem.t_bar() + problem.epsilon,
            mu_tilde: budget.mu_tilde,
            u_slack: problem.shift_set.lipschitz() * budget.delta_k,
        }
    }

    fn encode(&self, d: &DiscreteDecision) -> Vec<f64> {
        let mut z: Vec<f64> = d.a.iter().flat_map(|a| a.iter().copied()).collect();
        if self.opts.optimize_shift {
            z.extend(d.u[1..].iter().flat_map(|u| u.iter().copied()));
        }
        z.push(d.horizon);
        z
    }

    fn decode_controls(&self, z: &[f64], fallback_u: &[Vector]) -> (Vec<Vector>, Vec<Vector>, f64) {
        let k = self.problem.k;
        let d = self.problem.control_set.dim();
        let n = self.problem.geometry.dim();
        let a: Vec<Vector> = (0..k).map(|j| Vector::from_column_slice(&z[j * d..(j + 1) * d])).collect();
        let u = if self.opts.optimize_shift {
            let off = k * d;
            std::iter::once(self.u0.clone())
                .chain((0..k).map(|j| Vector::from_column_slice(&z[off + j * n..off + (j + 1) * n])))
                .collect()
        } else {
            fallback_u.to_vec()
        };
        (a, u, z[z.len() - 1])
    }

    fn project(&self, z: &mut [f64]) {
        let k = self.problem.k;
        let d = self.problem.control_set.dim();
        let n = self.problem.geometry.dim();
        for j in 0..k {
            let a = self.problem.control_set.project(&Vector::from_column_slice(&z[j * d..(j + 1) * d]));
            z[j * d..(j + 1) * d].copy_from_slice(a.as_slice());
        }
        if self.opts.optimize_shift && !self.problem.shift_set.is_empty() {
            let relaxed = self.problem.shift_set.with_slack(self.u_slack).expect("slack is nonnegative");
            let off = k * d;
            for j in 0..k {
                let u = Vector::from_column_slice(&z[off + j * n..off + (j + 1) * n]);
                if let Ok(p) = relaxed.project(&u) {
                    z[off + j * n..off + (j + 1) * n].copy_from_slice(p.as_slice());
                }
            }
        }
        let last = z.len() - 1;
        let t = self.problem.xi_t.project(&Vector::from_element(1, z[last]))[0];
        z[last] = t.clamp(self.t_lo, self.t_hi);
    }

    fn decision(&self, z: &[f64], fallback_u: &[Vector]) -> Result<DiscreteDecision, ShootingError> {
        let (a, u, horizon) = self.decode_controls(z, fallback_u);
        if !(horizon > 0.0) {
            return Err(ShootingError::Ocp(OcpError::MalformedDecision("nonpositive horizon".into())));
        }
        let ctrl = ControlSignal::on_mesh(u.clone(), a.clone(), horizon)?;
        let traj = catching_up_simulate(&self.problem.geometry, &self.problem.dynamics, &ctrl, &self.problem.x0, self.problem.k, self.problem.sign)?;
        Ok(DiscreteDecision { x: traj.states, u, a, horizon })
    }

    fn cost(&self, z: &[f64], fallback_u: &[Vector]) -> f64 {
        match self.decision(z, fallback_u) {
            Ok(d) => cost_jk(self.problem, &d, self.problem.t_bar(), self.mu_tilde).map(|(c, _)| c).unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        }
    }

    fn gradient(&self, z: &[f64], fallback_u: &[Vector]) -> Vec<f64> {
        (0..z.len())
            .into_par_iter()
            .map(|i| {
                let step = self.opts.fd_step * (1.0 + z[i].abs());
                let mut zp = z.to_vec();
                let mut zm = z.to_vec();
                zp[i] += step;
                zm[i] -= step;
                let (cp, cm) = (self.cost(&zp, fallback_u), self.cost(&zm, fallback_u));
                if cp.is_finite() && cm.is_finite() {
                    (cp - cm) / (2.0 * step)
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn projected_gradient_norm(&self, z: &[f64], g: &[f64]) -> f64 {
        let mut trial: Vec<f64> = z.iter().zip(g).map(|(a, b)| a - b).collect();
        self.project(&mut trial);
        z.iter().zip(&trial).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

/// Runs projected-gradient single shooting from `init`.
pub fn solve_shooting(problem: &SweepingOCP, init: &DiscreteDecision, opts: ShootingOptions) -> Result<ShootingResult, ShootingError> {
    problem.validate()?;
    if init.k() != problem.k {
        return Err(ShootingError::InfeasibleInit(format!("decision has {} cells, problem has {}", init.k(), problem.k)));
    }
    let shooter = Shooter::new(problem, opts);
    let fallback_u = init.u.clone();
    let mut z = shooter.encode(init);
    let raw = z.clone();
    shooter.project(&mut z);
    let moved = z.iter().zip(&raw).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if moved > opts.init_tol {
        return Err(ShootingError::InfeasibleInit(format!("controls or horizon lie {moved:.3e} outside their sets")));
    }
    let start = shooter.decision(&z, &fallback_u)?;
    let report = check_constraints(problem, &start, opts.init_tol)?;
    if !report.passes_implicit() {
        return Err(ShootingError::InfeasibleInit(format!("{report:?}")));
    }

    let mut cost = shooter.cost(&z, &fallback_u);
    let mut g = shooter.gradient(&z, &fallback_u);
    let mut gnorm = shooter.projected_gradient_norm(&z, &g);
    let mut history = vec![HistoryEntry { iter: 0, cost, gnorm, horizon: z[z.len() - 1] }];
    let mut step = opts.initial_step;
    let mut status = ShootingStatus::MaxIterations;

    for iter in 1..=opts.max_iters {
        let gtol = opts.gtol.unwrap_or(1e-6 * (1.0 + cost.abs()));
        if gnorm <= gtol {
            status = ShootingStatus::Converged;
            break;
        }
        let mut accepted = None;
        let mut alpha = step;
        let mut left_neighbourhood = false;
        for _ in 0..=opts.max_halvings {
            let mut trial: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a - alpha * b).collect();
            shooter.project(&mut trial);
            let decrease: f64 = g.iter().zip(trial.iter().zip(&z)).map(|(gi, (t, zi))| gi * (t - zi)).sum();
            let c = shooter.cost(&trial, &fallback_u);
            if c.is_finite() && c <= cost + opts.armijo * decrease && c <= cost {
                // Steps that leave the localization neighbourhood are shortened like non-descent steps.
                let r = check_constraints(problem, &shooter.decision(&trial, &fallback_u)?, opts.init_tol)?;
                left_neighbourhood = r.con5 > 0.0 || r.con6 > 0.0;
                if !left_neighbourhood {
                    accepted = Some((trial, c));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, c)) = accepted else {
            status = if left_neighbourhood { ShootingStatus::LocalizationViolated } else { ShootingStatus::LineSearchStall };
            break;
        };
        step = (alpha * 2.0).min(1e6);
        z = trial;
        cost = c;
        g = shooter.gradient(&z, &fallback_u);
        gnorm = shooter.projected_gradient_norm(&z, &g);
        history.push(HistoryEntry { iter, cost, gnorm, horizon: z[z.len() - 1] });
    }
    if status == ShootingStatus::MaxIterations && gnorm <= opts.gtol.unwrap_or(1e-6 * (1.0 + cost.abs())) {
        status = ShootingStatus::Converged;
    }
    let best = shooter.decision(&z, &fallback_u)?;
    let feasibility = check_constraints(problem, &best, opts.init_tol)?;
    Ok(ShootingResult { best, cost, history, status, feasibility })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximation::ReferenceSolution;
    use crate::controls::{ControlSetA, ControlSetU};
    use crate::dynamics::{PerturbationMap, Sign};
    use crate::geometry::{ConstraintSet, GeometryConstants, SmoothConstraint};
    use crate::ocp::{ControlEnergy, EndpointSet, ZeroTerminal};
    use std::sync::Arc;

    fn v(x: &[f64]) -> Vector {
        Vector::from_vec(x.to_vec())
    }

    fn separable_problem(k: usize) -> SweepingOCP {
        // f ≡ 0, ℓ = ½‖a‖², φ ≡ 0, A a box around 0; reference at rest with a ≡ 0.
        let g = SmoothConstraint::affine(v(&[1.0]), 10.0);
        let geometry = ConstraintSet::new(vec![g], GeometryConstants { m1: 1.0, m2: 1.0, m3: 0.0, beta: 1.0, rho: 1.0, c: 1e6 }).unwrap();
        let reference = ReferenceSolution::from_fns(1, 1, 2.0, 1.0, |_| v(&[0.0]), |_, _| v(&[0.0]), |_| v(&[0.0]), |_, _| v(&[0.0]), |_| v(&[0.0])).unwrap();
        SweepingOCP {
            geometry,
            dynamics: PerturbationMap::zero(1, 1),
            sign: Sign::Plus,
            shift_set: ControlSetU::unconstrained(),
            control_set: ControlSetA::boxed(v(&[-1.0]), v(&[1.0])).unwrap(),
            terminal: Arc::new(ZeroTerminal),
            running: Arc::new(ControlEnergy),
            xi_x: EndpointSet::AllSpace,
            xi_t: EndpointSet::HalfLine { lower: 0.0 },
            reference,
            x0: v(&[0.0]),
            epsilon: 10.0,
            k,
            quadrature_points: 4,
        }
    }

    #[test]
    fn separable_quadratic_converges_to_reference() {
        let p = separable_problem(8);
        let init = DiscreteDecision { x: vec![v(&[0.0]); 9], u: vec![v(&[0.0]); 9], a: vec![v(&[0.7]); 8], horizon: 3.0 };
        let opts = ShootingOptions { optimize_shift: false, ..ShootingOptions::default() };
        let r = solve_shooting(&p, &init, opts).unwrap();
        assert_eq!(r.status, ShootingStatus::Converged);
        assert!(r.best.a.iter().all(|a| a[0].abs() < 1e-4));
        assert!((r.best.horizon - 2.0).abs() < 1e-4);
        assert!(r.cost < 1e-7);
        assert!(r.history.windows(2).all(|w| w[1].cost <= w[0].cost));
    }

    #[test]
    fn out_of_box_initial_controls_are_rejected() {
        let p = separable_problem(4);
        let init = DiscreteDecision { x: vec![v(&[0.0]); 5], u: vec![v(&[0.0]); 5], a: vec![v(&[3.0]); 4], horizon: 2.0 };
        assert!(matches!(solve_shooting(&p, &init, ShootingOptions::default()), Err(ShootingError::InfeasibleInit(_))));
    }

    #[test]
    fn shift_variables_stay_at_reference_when_unpenalized() {
        let p = separable_problem(6);
        let init = DiscreteDecision { x: vec![v(&[0.0]); 7], u: vec![v(&[0.0]); 7], a: vec![v(&[0.2]); 6], horizon: 2.0 };
        let r = solve_shooting(&p, &init, ShootingOptions::default()).unwrap();
        assert!(r.best.u.iter().all(|u| u[0].abs() < 1e-6));
        assert!(r.feasibility.passes_implicit());
    }
}
