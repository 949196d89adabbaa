//! First-order stationarity of the bilevel program as a square-free
//! root-finding system.
//!
//! Unknowns stack as u = (z, zeta) with z = (w, X flattened row-major) and
//! zeta = (beta, beta_hat, lambda): beta multiplies the constraints in the
//! learner's selection conditions, beta_hat in the adversary's, lambda
//! couples the two objectives. The residual stacks three gradient blocks
//!
//!   H = ( dF/dw ; dF/dX - lambda df/dX - Jg^T beta ; df/dX + Jg^T beta_hat )
//!
//! followed by one Fischer-Burmeister row per complementarity pair:
//! fb(beta_i, -g_i), fb(beta_hat_i, -g_i), and fb(lambda, 0). A zero of the
//! stacked residual is a stationarity candidate; the merit function is half
//! its squared norm.
//!
//! The system is overdetermined: q + 2mq + 2m + 1 residuals over
//! q + mq + 2m + 1 unknowns (mq extra rows). The unconstrained variant drops
//! the constraint rows and both constraint multiplier blocks, keeping lambda.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::constraints::{eval_constraints, ConstraintError};
use crate::objective::{gradients_at, unflatten_rows, Weights};
use crate::problem::BilevelProblem;
use crate::solver::ResidualSystem;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StationarityError {
    #[error("point has wrong shape: {what}")]
    ShapeMismatch { what: String },
    #[error("point contains a non-finite entry")]
    NonFinite,
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("witness precondition failed: {reason}")]
pub struct PreconditionFailed {
    pub reason: String,
}

/// Which complementarity structure the residual carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemVariant {
    /// Full system with similarity constraints and multipliers beta, beta_hat.
    Constrained,
    /// Constraint rows and their multipliers removed; lambda kept.
    Unconstrained,
}

impl SystemVariant {
    pub fn multiplier_len(&self, m: usize) -> usize {
        match self {
            SystemVariant::Constrained => 2 * m + 1,
            SystemVariant::Unconstrained => 1,
        }
    }
}

/// One point of the stationarity system: primal block z = (w, X) of length
/// q + mq and multiplier block zeta. Constrained points carry
/// zeta = (beta, beta_hat, lambda) of length 2m + 1; unconstrained ones just
/// (lambda).
#[derive(Debug, Clone, PartialEq)]
pub struct StationarityPoint {
    z: DVector<f64>,
    zeta: DVector<f64>,
    q: usize,
    m: usize,
}

impl StationarityPoint {
    pub fn new(z: DVector<f64>, zeta: DVector<f64>, q: usize, m: usize) -> Result<Self, StationarityError> {
        Self::with_variant(z, zeta, q, m, SystemVariant::Constrained)
    }

    pub fn unconstrained(z: DVector<f64>, lambda: f64, q: usize, m: usize) -> Result<Self, StationarityError> {
        Self::with_variant(z, DVector::from_element(1, lambda), q, m, SystemVariant::Unconstrained)
    }

    pub fn with_variant(
        z: DVector<f64>,
        zeta: DVector<f64>,
        q: usize,
        m: usize,
        variant: SystemVariant,
    ) -> Result<Self, StationarityError> {
        if z.len() != q + m * q {
            return Err(StationarityError::ShapeMismatch {
                what: format!("z has length {}, expected q + mq = {}", z.len(), q + m * q),
            });
        }
        let want = variant.multiplier_len(m);
        if zeta.len() != want {
            return Err(StationarityError::ShapeMismatch {
                what: format!("zeta has length {}, expected {}", zeta.len(), want),
            });
        }
        if z.iter().chain(zeta.iter()).any(|v| !v.is_finite()) {
            return Err(StationarityError::NonFinite);
        }
        Ok(Self { z, zeta, q, m })
    }

    /// Split a stacked unknown vector u = (z, zeta) back into a point.
    pub fn from_stacked(u: &DVector<f64>, q: usize, m: usize, variant: SystemVariant) -> Result<Self, StationarityError> {
        let zlen = q + m * q;
        let total = zlen + variant.multiplier_len(m);
        if u.len() != total {
            return Err(StationarityError::ShapeMismatch {
                what: format!("stacked vector has length {}, expected {}", u.len(), total),
            });
        }
        let z = DVector::from_fn(zlen, |i, _| u[i]);
        let zeta = DVector::from_fn(u.len() - zlen, |i, _| u[zlen + i]);
        Self::with_variant(z, zeta, q, m, variant)
    }

    pub fn stacked(&self) -> DVector<f64> {
        let mut u = DVector::zeros(self.z.len() + self.zeta.len());
        u.rows_mut(0, self.z.len()).copy_from(&self.z);
        u.rows_mut(self.z.len(), self.zeta.len()).copy_from(&self.zeta);
        u
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn zeta(&self) -> &DVector<f64> {
        &self.zeta
    }

    pub fn weights(&self) -> Weights {
        Weights::new(DVector::from_fn(self.q, |i, _| self.z[i])).expect("finite by construction")
    }

    /// The adversary block of z as an m x q matrix.
    pub fn x_matrix(&self) -> DMatrix<f64> {
        let tail = DVector::from_fn(self.m * self.q, |i, _| self.z[self.q + i]);
        unflatten_rows(&tail, self.m, self.q)
    }

    pub fn beta(&self) -> Option<DVector<f64>> {
        (self.zeta.len() == 2 * self.m + 1)
            .then(|| DVector::from_fn(self.m, |i, _| self.zeta[i]))
    }

    pub fn beta_hat(&self) -> Option<DVector<f64>> {
        (self.zeta.len() == 2 * self.m + 1)
            .then(|| DVector::from_fn(self.m, |i, _| self.zeta[self.m + i]))
    }

    pub fn lambda(&self) -> f64 {
        self.zeta[self.zeta.len() - 1]
    }
}

/// A residual evaluation: the stacked residual phi, its Newton derivative,
/// and the merit value with its gradient. grad_merit is J^T phi by
/// construction, which is exactly the gradient of 0.5 ||phi||^2 wherever phi
/// is differentiable and a valid generalized gradient at the kinks.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualEval {
    pub phi: DVector<f64>,
    pub newton_jacobian: DMatrix<f64>,
    pub merit: f64,
    pub grad_merit: DVector<f64>,
}

impl ResidualEval {
    pub fn new(phi: DVector<f64>, newton_jacobian: DMatrix<f64>) -> Self {
        assert_eq!(
            newton_jacobian.nrows(),
            phi.len(),
            "jacobian rows must match residual length"
        );
        let merit = 0.5 * phi.norm_squared();
        let grad_merit = newton_jacobian.transpose() * &phi;
        Self { phi, newton_jacobian, merit, grad_merit }
    }
}

/// The Fischer-Burmeister function sqrt(a^2 + b^2) - a - b: zero exactly when
/// a >= 0, b >= 0 and ab = 0.
pub fn fb(a: f64, b: f64) -> f64 {
    a.hypot(b) - a - b
}

/// Generalized derivative of `fb`. Away from the origin the function is
/// smooth with gradient (a/r - 1, b/r - 1); at the origin any pair
/// (u/r' - 1, v/r' - 1) works and the symmetric choice sqrt(2)/2 - 1 is used.
pub fn fb_newton_derivative(a: f64, b: f64) -> (f64, f64) {
    if a == 0.0 && b == 0.0 {
        let v = std::f64::consts::FRAC_1_SQRT_2 - 1.0;
        (v, v)
    } else {
        let r = a.hypot(b);
        (a / r - 1.0, b / r - 1.0)
    }
}

/// The three stacked gradient blocks of the constrained system (no
/// complementarity rows), length q + 2mq.
pub fn assemble_h(pt: &StationarityPoint, p: &BilevelProblem) -> Result<DVector<f64>, StationarityError> {
    let ev = assemble_phi(pt, p)?;
    let len = p.q() + 2 * p.m() * p.q();
    Ok(DVector::from_fn(len, |i, _| ev.phi[i]))
}

/// Residual, Newton derivative, and merit of the constrained system at `pt`.
pub fn assemble_phi(pt: &StationarityPoint, p: &BilevelProblem) -> Result<ResidualEval, StationarityError> {
    assemble(pt, p, SystemVariant::Constrained)
}

/// Same for the unconstrained variant (no constraint rows, zeta = lambda).
pub fn assemble_phi_unconstrained(
    pt: &StationarityPoint,
    p: &BilevelProblem,
) -> Result<ResidualEval, StationarityError> {
    assemble(pt, p, SystemVariant::Unconstrained)
}

fn assemble(
    pt: &StationarityPoint,
    p: &BilevelProblem,
    variant: SystemVariant,
) -> Result<ResidualEval, StationarityError> {
    let q = p.q();
    let m = p.m();
    if pt.q != q || pt.m != m {
        return Err(StationarityError::ShapeMismatch {
            what: format!("point built for q={}, m={}, problem has q={q}, m={m}", pt.q, pt.m),
        });
    }
    if pt.zeta.len() != variant.multiplier_len(m) {
        return Err(StationarityError::ShapeMismatch {
            what: format!(
                "zeta has length {}, variant expects {}",
                pt.zeta.len(),
                variant.multiplier_len(m)
            ),
        });
    }
    let mq = m * q;
    let w = pt.weights();
    let x = pt.x_matrix();
    let lambda = pt.lambda();

    let g = gradients_at(&w, &x, p);
    let upper_x = g.upper_x_flat();
    let lower_x = g.lower_x_flat();

    let n_res = match variant {
        SystemVariant::Constrained => q + 2 * mq + 2 * m + 1,
        SystemVariant::Unconstrained => q + 2 * mq + 1,
    };
    let n_unk = q + mq + variant.multiplier_len(m);
    let mut phi = DVector::zeros(n_res);
    let mut jac = DMatrix::zeros(n_res, n_unk);

    // rows [0, q): dF/dw
    for r in 0..q {
        phi[r] = g.upper_w[r];
        for c in 0..q {
            jac[(r, c)] = g.upper_ww[(r, c)];
        }
        for c in 0..mq {
            jac[(r, q + c)] = g.upper_wx[(r, c)];
        }
    }

    // rows [q, q+mq): dF/dX - lambda df/dX (- Jg^T beta)
    // rows [q+mq, q+2mq): df/dX (+ Jg^T beta_hat)
    for r in 0..mq {
        phi[q + r] = upper_x[r] - lambda * lower_x[r];
        phi[q + mq + r] = lower_x[r];
        for c in 0..q {
            jac[(q + r, c)] = g.upper_wx[(c, r)] - lambda * g.lower_wx[(c, r)];
            jac[(q + mq + r, c)] = g.lower_wx[(c, r)];
        }
        for c in 0..mq {
            jac[(q + r, q + c)] = g.upper_xx[(r, c)] - lambda * g.lower_xx[(r, c)];
            jac[(q + mq + r, q + c)] = g.lower_xx[(r, c)];
        }
        jac[(q + r, q + mq + variant.multiplier_len(m) - 1)] = -lower_x[r];
    }

    match variant {
        SystemVariant::Unconstrained => {
            // final row: fb(lambda, 0) = |lambda| - lambda
            let (da, _) = fb_newton_derivative(lambda, 0.0);
            phi[q + 2 * mq] = fb(lambda, 0.0);
            jac[(q + 2 * mq, q + mq)] = da;
        }
        SystemVariant::Constrained => {
            let beta = pt.beta().expect("constrained point");
            let beta_hat = pt.beta_hat().expect("constrained point");
            let ce = eval_constraints(&x, p.adversary().origin(), p.params().delta())?;

            // constraint contributions to the two X gradient blocks
            for i in 0..m {
                for k in 0..q {
                    let col = i * q + k;
                    let jg = ce.jacobian[(i, col)];
                    phi[q + col] -= beta[i] * jg;
                    phi[q + mq + col] += beta_hat[i] * jg;
                    // multiplier columns
                    jac[(q + col, q + mq + i)] = -jg;
                    jac[(q + mq + col, q + mq + m + i)] = jg;
                    // curvature of g scaled by its multiplier
                    for c in 0..q {
                        let h = ce.hessians[i][(k, c)];
                        jac[(q + col, q + i * q + c)] -= beta[i] * h;
                        jac[(q + mq + col, q + i * q + c)] += beta_hat[i] * h;
                    }
                }
            }

            // complementarity rows: fb(beta_i, -g_i), fb(beta_hat_i, -g_i),
            // and fb(lambda, 0); the chain rule composes the fb derivative
            // with -dg/dX in the b slot
            for i in 0..m {
                let (da, db) = fb_newton_derivative(beta[i], -ce.values[i]);
                let row = q + 2 * mq + i;
                phi[row] = fb(beta[i], -ce.values[i]);
                jac[(row, q + mq + i)] = da;
                for k in 0..q {
                    jac[(row, q + i * q + k)] = -db * ce.jacobian[(i, i * q + k)];
                }

                let (da, db) = fb_newton_derivative(beta_hat[i], -ce.values[i]);
                let row = q + 2 * mq + m + i;
                phi[row] = fb(beta_hat[i], -ce.values[i]);
                jac[(row, q + mq + m + i)] = da;
                for k in 0..q {
                    jac[(row, q + i * q + k)] = -db * ce.jacobian[(i, i * q + k)];
                }
            }
            let (da, _) = fb_newton_derivative(lambda, 0.0);
            let row = q + 2 * mq + 2 * m;
            phi[row] = fb(lambda, 0.0);
            jac[(row, q + mq + 2 * m)] = da;
        }
    }

    Ok(ResidualEval::new(phi, jac))
}

/// The bilevel stationarity system in the shape the solver consumes.
/// Iterate admissibility keeps every adversary row away from zero, where the
/// similarity is undefined: ||X_i|| must stay above 1e-8 ||X0_i||.
#[derive(Debug, Clone, Copy)]
pub struct BilevelSystem<'a> {
    problem: &'a BilevelProblem,
    variant: SystemVariant,
}

impl<'a> BilevelSystem<'a> {
    pub fn constrained(problem: &'a BilevelProblem) -> Self {
        Self { problem, variant: SystemVariant::Constrained }
    }

    pub fn unconstrained(problem: &'a BilevelProblem) -> Self {
        Self { problem, variant: SystemVariant::Unconstrained }
    }

    pub fn variant(&self) -> SystemVariant {
        self.variant
    }

    pub fn problem(&self) -> &'a BilevelProblem {
        self.problem
    }

    pub fn point_from(&self, u: &DVector<f64>) -> Result<StationarityPoint, StationarityError> {
        StationarityPoint::from_stacked(u, self.problem.q(), self.problem.m(), self.variant)
    }
}

impl ResidualSystem for BilevelSystem<'_> {
    fn unknowns(&self) -> usize {
        let p = self.problem;
        p.q() + p.m() * p.q() + self.variant.multiplier_len(p.m())
    }

    fn residuals(&self) -> usize {
        let p = self.problem;
        let base = p.q() + 2 * p.m() * p.q();
        match self.variant {
            SystemVariant::Constrained => base + 2 * p.m() + 1,
            SystemVariant::Unconstrained => base + 1,
        }
    }

    fn eval(&self, u: &DVector<f64>) -> Option<ResidualEval> {
        let pt = self.point_from(u).ok()?;
        assemble(&pt, self.problem, self.variant).ok()
    }

    fn admissible(&self, u: &DVector<f64>) -> bool {
        let q = self.problem.q();
        let x0 = self.problem.adversary().origin();
        for i in 0..self.problem.m() {
            let mut norm_sq = 0.0;
            for k in 0..q {
                let v = u[q + i * q + k];
                if !v.is_finite() {
                    return false;
                }
                norm_sq += v * v;
            }
            let floor = 1e-8 * x0.row(i).norm();
            if norm_sq.sqrt() < floor {
                return false;
            }
        }
        u.iter().all(|v| v.is_finite())
    }
}

/// Two distinct adversary matrices with identical lower-level objective
/// value: mass moves between two coordinates of one row along the level set
/// of w, leaving every w.X_i untouched. Both are feasible whenever delta sits
/// below their similarity scores, which the caller picks.
///
/// Requires q > 1, every w entry nonzero, and a nonzero entry somewhere in
/// the adversary's current data.
pub fn multiple_optima_witness(
    w: &Weights,
    p: &BilevelProblem,
) -> Result<(DMatrix<f64>, DMatrix<f64>), PreconditionFailed> {
    let q = p.q();
    if q < 2 {
        return Err(PreconditionFailed { reason: "need q > 1 to shift mass between coordinates".into() });
    }
    if let Some(j) = (0..q).find(|&j| w.as_vector()[j] == 0.0) {
        return Err(PreconditionFailed { reason: format!("weight {j} is zero") });
    }
    let x_star = p.adversary().current().clone();

    // first (row, k, j) whose shifted row stays nonzero
    for i in 0..x_star.nrows() {
        for k in 0..q {
            if x_star[(i, k)] == 0.0 {
                continue;
            }
            for j in (0..q).filter(|&j| j != k) {
                let mut x_prime = x_star.clone();
                x_prime[(i, j)] =
                    x_star[(i, j)] + w.as_vector()[k] / w.as_vector()[j] * x_star[(i, k)];
                x_prime[(i, k)] = 0.0;
                if x_prime.row(i).norm() > 0.0 {
                    return Ok((x_star, x_prime));
                }
            }
        }
    }
    Err(PreconditionFailed { reason: "adversary data has no usable nonzero entry".into() })
}
