//! The prediction function, both players' loss functions, and every analytic
//! first and second derivative of the two objectives.
//!
//! Conventions used throughout:
//! - The learner's objective F sums its loss over the static set and the
//!   adversary's current data, plus an optional ridge term (1/rho)*||w||^2.
//! - The adversary's objective f is the logistic loss with flipped labels
//!   over the adversary's data only.
//! - X is flattened row-major: entry (i, j) lands at index i*q + j.
//! - Normalization (1/n, 1/m) and the ridge term follow the problem's
//!   `HyperParams`; disabling either drops the corresponding factors from the
//!   derivatives as well, so objective and derivatives always agree.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::problem::{BilevelProblem, ProblemError};

/// Probabilities are clamped to this interval before any log, so saturated
/// weights produce large finite losses instead of infinities.
pub const PROB_CLAMP: f64 = 1e-12;

/// Classifier weights, guaranteed finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    w: DVector<f64>,
}

impl Weights {
    pub fn new(w: DVector<f64>) -> Result<Self, ProblemError> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(ProblemError::NonFinite { what: "weights".into() });
        }
        Ok(Self { w })
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.len() == 0
    }
}

/// Probability argument fell outside the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("probability {p} outside the open interval (0, 1)")]
pub struct DomainError {
    pub p: f64,
}

/// 1 / (1 + exp(-w.x)). Stable for |w.x| well past 700: the exponential is
/// only ever taken of a non-positive number.
pub fn sigmoid(w: &Weights, x: &DVector<f64>) -> f64 {
    assert_eq!(w.len(), x.len(), "weights and features disagree in length");
    sigmoid_z(w.as_vector().dot(x))
}

pub(crate) fn sigmoid_z(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic loss of the learner: -y log p - (1-y) log (1-p).
pub fn learner_loss(p: f64, y: f64) -> Result<f64, DomainError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(DomainError { p });
    }
    debug_assert!(y == 0.0 || y == 1.0);
    Ok(-y * p.ln() - (1.0 - y) * (1.0 - p).ln())
}

/// Logistic loss with the opposite label: (y-1) log p - y log (1-p).
/// Identical to `learner_loss(p, 1-y)`; the adversary profits where the
/// learner hurts.
pub fn adversary_loss(p: f64, y: f64) -> Result<f64, DomainError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(DomainError { p });
    }
    debug_assert!(y == 0.0 || y == 1.0);
    Ok((y - 1.0) * p.ln() - y * (1.0 - p).ln())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// The three addends of the learner's objective, kept separate so callers can
/// inspect them; their sum is the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperParts {
    pub static_term: f64,
    pub adversary_term: f64,
    pub ridge_term: f64,
}

impl UpperParts {
    pub fn total(&self) -> f64 {
        self.static_term + self.adversary_term + self.ridge_term
    }
}

/// Learner's objective at the adversary's current data.
pub fn upper_objective(w: &Weights, p: &BilevelProblem) -> f64 {
    upper_objective_at(w, p.adversary().current(), p)
}

/// Learner's objective with the adversary's data overridden by `x`.
pub fn upper_objective_at(w: &Weights, x: &DMatrix<f64>, p: &BilevelProblem) -> f64 {
    upper_objective_parts_at(w, x, p).total()
}

pub fn upper_objective_parts_at(w: &Weights, x: &DMatrix<f64>, p: &BilevelProblem) -> UpperParts {
    let d = p.static_data().features();
    let gamma = p.static_data().labels();
    let labels = p.adversary().labels();
    let n = p.n() as f64;
    let m = p.m() as f64;
    assert_eq!(x.nrows(), p.m(), "adversary data row count");
    assert_eq!(x.ncols(), p.q(), "adversary data feature dimension");

    let mut static_term = 0.0;
    for i in 0..p.n() {
        let prob = clamp_prob(sigmoid_z(row_dot(d, i, w.as_vector())));
        static_term += learner_loss(prob, gamma[i]).expect("clamped probability");
    }
    let mut adversary_term = 0.0;
    for i in 0..p.m() {
        let prob = clamp_prob(sigmoid_z(row_dot(x, i, w.as_vector())));
        adversary_term += learner_loss(prob, labels[i]).expect("clamped probability");
    }
    if p.params().normalize() {
        static_term /= n;
        adversary_term /= m;
    }
    let ridge_term = match p.params().rho() {
        Some(rho) => w.as_vector().norm_squared() / rho,
        None => 0.0,
    };
    UpperParts { static_term, adversary_term, ridge_term }
}

/// Adversary's objective at the adversary's current data.
pub fn lower_objective(w: &Weights, p: &BilevelProblem) -> f64 {
    lower_objective_at(w, p.adversary().current(), p)
}

/// Adversary's objective with its data overridden by `x`.
pub fn lower_objective_at(w: &Weights, x: &DMatrix<f64>, p: &BilevelProblem) -> f64 {
    let labels = p.adversary().labels();
    assert_eq!(x.nrows(), p.m(), "adversary data row count");
    let mut total = 0.0;
    for i in 0..p.m() {
        let prob = clamp_prob(sigmoid_z(row_dot(x, i, w.as_vector())));
        total += adversary_loss(prob, labels[i]).expect("clamped probability");
    }
    if p.params().normalize() {
        total /= p.m() as f64;
    }
    total
}

/// Every first and second derivative block of the two objectives, evaluated
/// at one (w, X). `upper_*` blocks belong to the learner's objective F,
/// `lower_*` to the adversary's objective f; suffixes name the variables
/// differentiated against, X flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// dF/dw, length q.
    pub upper_w: DVector<f64>,
    /// dF/dX as an m x q matrix.
    pub upper_x: DMatrix<f64>,
    /// df/dw, length q.
    pub lower_w: DVector<f64>,
    /// df/dX as an m x q matrix.
    pub lower_x: DMatrix<f64>,
    /// d2F/dw dw, q x q, symmetric.
    pub upper_ww: DMatrix<f64>,
    /// d2f/dw dw, q x q, symmetric.
    pub lower_ww: DMatrix<f64>,
    /// d2F/dw dX, q x mq: rows index w, columns index flattened X.
    pub upper_wx: DMatrix<f64>,
    /// d2f/dw dX, q x mq.
    pub lower_wx: DMatrix<f64>,
    /// d2F/dX dX, mq x mq, block diagonal per adversary instance, symmetric.
    pub upper_xx: DMatrix<f64>,
    /// d2f/dX dX, mq x mq, same structure.
    pub lower_xx: DMatrix<f64>,
}

impl GradientBundle {
    /// dF/dX flattened row-major to length mq.
    pub fn upper_x_flat(&self) -> DVector<f64> {
        flatten_rows(&self.upper_x)
    }

    /// df/dX flattened row-major to length mq.
    pub fn lower_x_flat(&self) -> DVector<f64> {
        flatten_rows(&self.lower_x)
    }
}

/// Row-major flattening: entry (i, j) lands at i*ncols + j.
pub fn flatten_rows(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows() * m.ncols(), |k, _| m[(k / m.ncols(), k % m.ncols())])
}

/// Inverse of `flatten_rows`.
pub fn unflatten_rows(v: &DVector<f64>, nrows: usize, ncols: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), nrows * ncols);
    DMatrix::from_fn(nrows, ncols, |i, j| v[i * ncols + j])
}

/// All derivative blocks at the adversary's current data.
pub fn gradients(w: &Weights, p: &BilevelProblem) -> GradientBundle {
    gradients_at(w, p.adversary().current(), p)
}

/// All derivative blocks with the adversary's data overridden by `x`.
///
/// The second derivatives in X are block diagonal: instance i only couples
/// with itself, through the rank-one block c_i * w w^T with
/// c_i = sigma_i (1 - sigma_i) / m.
pub fn gradients_at(w: &Weights, x: &DMatrix<f64>, p: &BilevelProblem) -> GradientBundle {
    let q = p.q();
    let m = p.m();
    let n = p.n();
    assert_eq!(w.len(), q, "weights length");
    assert_eq!(x.nrows(), m, "adversary data row count");
    assert_eq!(x.ncols(), q, "adversary data feature dimension");

    let d = p.static_data().features();
    let gamma = p.static_data().labels();
    let labels = p.adversary().labels();
    let wv = w.as_vector();

    let (inv_n, inv_m) = if p.params().normalize() {
        (1.0 / n as f64, 1.0 / m as f64)
    } else {
        (1.0, 1.0)
    };

    // static pass: (1/n) D^T (sigma - gamma) and (1/n) D^T S (I - S) D
    let mut upper_w = DVector::zeros(q);
    let mut upper_ww = DMatrix::zeros(q, q);
    for i in 0..n {
        let s = sigmoid_z(row_dot(d, i, wv));
        let err = s - gamma[i];
        let curv = s * (1.0 - s);
        for a in 0..q {
            let da = d[(i, a)];
            upper_w[a] += inv_n * err * da;
            for b in 0..q {
                upper_ww[(a, b)] += inv_n * curv * da * d[(i, b)];
            }
        }
    }

    // adversary pass: both objectives share sigma_i, differ in labels only
    let mut lower_w = DVector::zeros(q);
    let mut lower_ww = DMatrix::zeros(q, q);
    let mut upper_x = DMatrix::zeros(m, q);
    let mut lower_x = DMatrix::zeros(m, q);
    let mut upper_wx = DMatrix::zeros(q, m * q);
    let mut lower_wx = DMatrix::zeros(q, m * q);
    let mut upper_xx = DMatrix::zeros(m * q, m * q);
    let mut lower_xx = DMatrix::zeros(m * q, m * q);

    for i in 0..m {
        let s = sigmoid_z(row_dot(x, i, wv));
        let err_upper = s - labels[i];
        let err_lower = s - (1.0 - labels[i]);
        let curv = s * (1.0 - s);

        for a in 0..q {
            let xa = x[(i, a)];
            upper_w[a] += inv_m * err_upper * xa;
            lower_w[a] += inv_m * err_lower * xa;
            upper_x[(i, a)] = inv_m * wv[a] * err_upper;
            lower_x[(i, a)] = inv_m * wv[a] * err_lower;
            for b in 0..q {
                let xb = x[(i, b)];
                lower_ww[(a, b)] += inv_m * curv * xa * xb;
                // cross blocks: d2/dw_a dX_{ib} = (X_{ia} w_b curv + [a==b] err) / m
                let smooth = inv_m * xa * wv[b] * curv;
                let col = i * q + b;
                upper_wx[(a, col)] = smooth + if a == b { inv_m * err_upper } else { 0.0 };
                lower_wx[(a, col)] = smooth + if a == b { inv_m * err_lower } else { 0.0 };
                // X-X blocks coincide for both objectives (labels cancel)
                let xx = inv_m * curv * wv[a] * wv[b];
                upper_xx[(i * q + a, col)] = xx;
                lower_xx[(i * q + a, col)] = xx;
            }
        }
    }
    upper_ww += &lower_ww; // the (1/m) X^T S (I-S) X term appears in both

    if let Some(rho) = p.params().rho() {
        let scale = 2.0 / rho;
        for a in 0..q {
            upper_w[a] += scale * wv[a];
            upper_ww[(a, a)] += scale;
        }
    }

    GradientBundle {
        upper_w,
        upper_x,
        lower_w,
        lower_x,
        upper_ww,
        lower_ww,
        upper_wx,
        lower_wx,
        upper_xx,
        lower_xx,
    }
}

fn row_dot(m: &DMatrix<f64>, row: usize, v: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for c in 0..m.ncols() {
        acc += m[(row, c)] * v[c];
    }
    acc
}
