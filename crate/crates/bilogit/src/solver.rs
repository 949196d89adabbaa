//! Globalized Levenberg-Marquardt iteration for semismooth residual systems.
//!
//! Each step solves the damped normal equations
//! (J^T J + v I) d = -J^T phi with v = min(gamma1, gamma2 ||phi||). The full
//! step is accepted when it shrinks the merit by the factor kappa; otherwise
//! the direction falls back to steepest descent if it is nearly orthogonal to
//! the merit gradient or too short, and an Armijo backtracking line search
//! finds the step length. Iteration stops on a small residual, on stagnation
//! (successive residual norms shrinking by less than eta after a grace
//! period), or on the hard caps.
//!
//! The solver is deterministic: one platform, one start, one config give a
//! bit-identical residual history.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::problem::BilevelProblem;
use crate::stationarity::{BilevelSystem, ResidualEval, StationarityPoint, SystemVariant};

/// Anything the solver can drive to a root: a residual vector with a Newton
/// derivative, plus an admissibility region the iterates must not leave.
pub trait ResidualSystem {
    fn unknowns(&self) -> usize;
    fn residuals(&self) -> usize;
    /// Residual and Newton derivative at `u`; None where undefined.
    fn eval(&self, u: &DVector<f64>) -> Option<ResidualEval>;
    /// Candidate iterates failing this are stepped over by shrinking the
    /// step. Default: everywhere admissible.
    fn admissible(&self, _u: &DVector<f64>) -> bool {
        true
    }
}

/// Tuning knobs. Defaults are conventional for globalized LM; the stagnation
/// pair (eta, stagnation_k) stops runs whose residual has flatlined.
#[derive(Debug, Clone, PartialEq)]
pub struct LMConfig {
    /// Fast-step acceptance ratio, in (0,1): accept the full LM step when it
    /// leaves at most this fraction of the merit.
    pub kappa: f64,
    /// Residual norm below which the system counts as solved.
    pub epsilon: f64,
    /// Armijo sufficient-decrease constant, in (0,1).
    pub sigma: f64,
    /// Backtracking factor, in (0,1).
    pub beta_ls: f64,
    /// Descent-angle threshold: the LM direction is discarded when its
    /// cosine against the negative merit gradient is above -rho1.
    pub rho1: f64,
    /// Minimum useful LM step norm; shorter directions fall back to the
    /// gradient.
    pub rho2: f64,
    /// Damping caps: v = min(gamma1, gamma2 ||phi||).
    pub gamma1: f64,
    pub gamma2: f64,
    /// Stagnation ratio, in (0,1): consecutive residual norms shrinking by
    /// less than this trigger the stagnation stop.
    pub eta: f64,
    /// Grace iterations before the stagnation stop may fire.
    pub stagnation_k: usize,
    /// Hard iteration cap.
    pub max_iter: usize,
    /// Cap on line-search backtracks and admissibility bisections.
    pub max_backtracks: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            kappa: 0.9,
            epsilon: 1e-6,
            sigma: 1e-4,
            beta_ls: 0.5,
            rho1: 1e-8,
            rho2: 1e-8,
            gamma1: 1.0,
            gamma2: 1.0,
            eta: 0.995,
            stagnation_k: 50,
            max_iter: 2000,
            max_backtracks: 60,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<(), String> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.kappa) {
            return Err(format!("kappa {} outside (0,1)", self.kappa));
        }
        if !(self.epsilon > 0.0) {
            return Err(format!("epsilon {} not positive", self.epsilon));
        }
        if !in_unit(self.sigma) {
            return Err(format!("sigma {} outside (0,1)", self.sigma));
        }
        if !in_unit(self.beta_ls) {
            return Err(format!("beta_ls {} outside (0,1)", self.beta_ls));
        }
        if !(self.rho1 > 0.0 && self.rho2 > 0.0) {
            return Err("rho1 and rho2 must be positive".into());
        }
        if !(self.gamma1 > 0.0 && self.gamma2 > 0.0) {
            return Err("gamma1 and gamma2 must be positive".into());
        }
        if !in_unit(self.eta) {
            return Err(format!("eta {} outside (0,1)", self.eta));
        }
        if self.max_iter == 0 {
            return Err("max_iter must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Residual norm fell below epsilon.
    Converged,
    /// Residual ratio stayed above eta past the grace period.
    Stagnated,
    /// Hard iteration cap reached.
    MaxIterations,
    /// No acceptable step within the backtracking budget, or the merit
    /// gradient vanished at a nonzero residual.
    LineSearchFailed,
    /// Non-finite values or an unsolvable damped system.
    NumericalBreakdown,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::Stagnated => "stagnated",
            Termination::MaxIterations => "max-iterations",
            Termination::LineSearchFailed => "line-search-failed",
            Termination::NumericalBreakdown => "numerical-breakdown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Full LM step accepted by the kappa test.
    Fast,
    /// LM direction with Armijo backtracking.
    LineSearch,
    /// Steepest-descent fallback with Armijo backtracking.
    Gradient,
}

impl StepKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepKind::Fast => "fast",
            StepKind::LineSearch => "line-search",
            StepKind::Gradient => "gradient",
        }
    }
}

/// One accepted iteration, for trace files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub residual_norm: f64,
    pub merit: f64,
    pub step: StepKind,
    pub step_norm: f64,
}

/// Outcome of a solve on a bare residual system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemReport {
    pub final_u: DVector<f64>,
    /// ||phi|| at the start point and after every accepted iteration.
    pub residual_history: Vec<f64>,
    pub termination: Termination,
    pub iterations: usize,
    pub wall_time: f64,
    pub trace: Vec<TraceRecord>,
}

/// Outcome of a bilevel solve, with the unknowns split back into a point.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub final_point: StationarityPoint,
    pub residual_history: Vec<f64>,
    pub termination: Termination,
    pub iterations: usize,
    pub wall_time: f64,
    pub trace: Vec<TraceRecord>,
}

/// Solves the bilevel stationarity system from `start`, inferring the
/// constrained or unconstrained variant from the point's multiplier block.
///
/// Panics if the start does not match the problem's dimensions or sits where
/// the residual is undefined; the caller owns validation.
pub fn lm_solve(start: &StationarityPoint, p: &BilevelProblem, cfg: &LMConfig) -> SolveReport {
    let variant = if start.zeta().len() == 2 * p.m() + 1 {
        SystemVariant::Constrained
    } else {
        SystemVariant::Unconstrained
    };
    let sys = match variant {
        SystemVariant::Constrained => BilevelSystem::constrained(p),
        SystemVariant::Unconstrained => BilevelSystem::unconstrained(p),
    };
    let report = solve_system(&sys, &start.stacked(), cfg);
    let final_point = sys
        .point_from(&report.final_u)
        .expect("solver keeps iterates finite and correctly shaped");
    SolveReport {
        final_point,
        residual_history: report.residual_history,
        termination: report.termination,
        iterations: report.iterations,
        wall_time: report.wall_time,
        trace: report.trace,
    }
}

/// Core iteration on any residual system. See the module docs for the step
/// logic. Panics on an invalid config, a start of the wrong length, or a
/// start where the system is undefined.
pub fn solve_system<S: ResidualSystem + ?Sized>(
    sys: &S,
    start: &DVector<f64>,
    cfg: &LMConfig,
) -> SystemReport {
    if let Err(why) = cfg.validate() {
        panic!("invalid solver config: {why}");
    }
    assert_eq!(start.len(), sys.unknowns(), "start length vs system unknowns");
    assert!(sys.admissible(start), "start point is not admissible");
    let t0 = Instant::now();

    let mut u = start.clone();
    let mut ev = sys.eval(&u).expect("residual system undefined at the start point");
    let mut history = vec![ev.phi.norm()];
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut k = 0usize;

    let termination = loop {
        let norm = history[k];
        if !norm.is_finite() {
            break Termination::NumericalBreakdown;
        }
        if norm < cfg.epsilon {
            break Termination::Converged;
        }
        // ratio of the latest two residuals; the grace period k > K must have
        // passed before this stop may fire
        if k > cfg.stagnation_k && history[k] / history[k - 1] >= cfg.eta {
            break Termination::Stagnated;
        }
        if k >= cfg.max_iter {
            break Termination::MaxIterations;
        }

        let v = cfg.gamma1.min(cfg.gamma2 * norm);
        let Some(mut d) = damped_normal_solve(&ev.newton_jacobian, &ev.phi, v) else {
            break Termination::NumericalBreakdown;
        };

        // full step, bisected while it lands outside the admissible region
        let mut fast: Option<ResidualEval> = None;
        for _ in 0..=cfg.max_backtracks {
            let cand = &u + &d;
            if sys.admissible(&cand) {
                if let Some(e) = sys.eval(&cand) {
                    fast = Some(e);
                    break;
                }
            }
            d *= 0.5;
        }

        let accepted = match fast {
            Some(e) if e.merit <= cfg.kappa * ev.merit => {
                let step_norm = d.norm();
                u += &d;
                trace.push(TraceRecord {
                    iteration: k + 1,
                    residual_norm: e.phi.norm(),
                    merit: e.merit,
                    step: StepKind::Fast,
                    step_norm,
                });
                Some(e)
            }
            _ => {
                // step 8: discard a direction that is barely descent or too
                // short, in favor of the merit gradient
                let grad = &ev.grad_merit;
                let mut step = StepKind::LineSearch;
                let mut descent = grad.dot(&d);
                if descent > -cfg.rho1 * grad.norm() * d.norm() || d.norm() < cfg.rho2 {
                    d = -grad.clone();
                    descent = -grad.norm_squared();
                    step = StepKind::Gradient;
                }
                if !(descent < 0.0) {
                    // merit-stationary at a nonzero residual: nowhere to go
                    break Termination::LineSearchFailed;
                }

                let mut alpha = cfg.beta_ls;
                let mut found = None;
                for _ in 0..cfg.max_backtracks {
                    let cand = &u + alpha * &d;
                    if sys.admissible(&cand) {
                        if let Some(e) = sys.eval(&cand) {
                            // the strict inequality cannot fail in exact
                            // arithmetic; it guards merit monotonicity when
                            // alpha*sigma*descent underflows
                            if e.merit <= ev.merit + alpha * cfg.sigma * descent
                                && e.merit < ev.merit
                            {
                                found = Some((e, alpha));
                                break;
                            }
                        }
                    }
                    alpha *= cfg.beta_ls;
                }
                match found {
                    Some((e, alpha)) => {
                        let step_vec = alpha * &d;
                        u += &step_vec;
                        trace.push(TraceRecord {
                            iteration: k + 1,
                            residual_norm: e.phi.norm(),
                            merit: e.merit,
                            step,
                            step_norm: step_vec.norm(),
                        });
                        Some(e)
                    }
                    None => break Termination::LineSearchFailed,
                }
            }
        };

        match accepted {
            Some(e) => {
                history.push(e.phi.norm());
                ev = e;
                k += 1;
            }
            None => unreachable!("non-accepted branches break out of the loop"),
        }
    };

    SystemReport {
        final_u: u,
        residual_history: history,
        termination,
        iterations: k,
        wall_time: t0.elapsed().as_secs_f64(),
        trace,
    }
}

/// Solves (J^T J + v I) d = -J^T phi by Cholesky factorization with one round
/// of iterative refinement, and verifies the linear residual is at most 1e-10
/// relative to the right-hand side. None when the factorization fails or the
/// verification does not hold; with v > 0 that only happens on pathological
/// scaling.
pub fn damped_normal_solve(j: &DMatrix<f64>, phi: &DVector<f64>, v: f64) -> Option<DVector<f64>> {
    assert!(v > 0.0, "damping must be positive");
    assert_eq!(j.nrows(), phi.len(), "jacobian rows vs residual length");
    let jt = j.transpose();
    let mut a = &jt * j;
    for i in 0..a.nrows() {
        a[(i, i)] += v;
    }
    let b = -(&jt * phi);

    let chol = Cholesky::new(a.clone())?;
    let mut d = chol.solve(&b);
    for _ in 0..2 {
        let r = &b - &a * &d;
        if r.norm() <= 1e-10 * b.norm().max(1.0) {
            break;
        }
        d += chol.solve(&r);
    }
    let r = &b - &a * &d;
    (r.norm() <= 1e-10 * b.norm().max(1.0)).then_some(d)
}
