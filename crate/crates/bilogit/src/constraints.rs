//! The adversary's movement budget: row i of its data must keep cosine
//! similarity at least delta with where it started, written as
//! g_i(X) = delta - d(X_i, X0_i) <= 0. This module evaluates g and its first
//! and second derivatives, and can construct the feasible-but-not-convex
//! witness pair that exists for negative delta.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// A row norm fell below the floor where the similarity is undefined.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstraintError {
    #[error("zero vector (norm below {NORM_FLOOR:e}) at row {row:?}: cosine similarity undefined")]
    ZeroVector { row: Option<usize> },
}

/// Norms below this are treated as zero. Extreme, deliberately: real inputs
/// that small carry no direction.
pub const NORM_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("no witness: {reason}")]
pub struct WitnessNotFound {
    pub reason: String,
}

/// Constraint values and derivatives at one X. The Jacobian is block
/// sparse: constraint i depends only on row i of X, so its Jacobian row is
/// zero outside columns [i*q, (i+1)*q). Hessian blocks are per instance,
/// q x q, symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEval {
    pub values: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub hessians: Vec<DMatrix<f64>>,
}

/// x.x0 / (||x|| ||x0||), in [-1, 1].
pub fn cosine_similarity(x: &DVector<f64>, x0: &DVector<f64>) -> Result<f64, ConstraintError> {
    assert_eq!(x.len(), x0.len(), "vectors disagree in length");
    let nx = x.norm();
    let nx0 = x0.norm();
    if nx < NORM_FLOOR || nx0 < NORM_FLOOR {
        return Err(ConstraintError::ZeroVector { row: None });
    }
    Ok(x.dot(x0) / (nx * nx0))
}

/// g, its Jacobian, and its per-instance Hessian blocks at X.
///
/// With r = ||X_i||, r0 = ||X0_i|| and d the similarity of row i:
///   dg_i/dX_{ik}          = -(X0_{ik}/(r r0) - d X_{ik}/r^2)
///   d2g_i/dX_{ik} dX_{ic} = (X_{ic} X0_{ik} + X_{ik} X0_{ic})/(r^3 r0)
///                           - 3 d X_{ik} X_{ic}/r^4 + [k==c] d/r^2
/// and both vanish for rows other than i.
pub fn eval_constraints(
    x: &DMatrix<f64>,
    x0: &DMatrix<f64>,
    delta: f64,
) -> Result<ConstraintEval, ConstraintError> {
    assert_eq!(x.shape(), x0.shape(), "current and origin disagree in shape");
    let m = x.nrows();
    let q = x.ncols();

    let mut values = DVector::zeros(m);
    let mut jacobian = DMatrix::zeros(m, m * q);
    let mut hessians = Vec::with_capacity(m);

    for i in 0..m {
        let xi = x.row(i).transpose();
        let x0i = x0.row(i).transpose();
        let r = xi.norm();
        let r0 = x0i.norm();
        if r < NORM_FLOOR || r0 < NORM_FLOOR {
            return Err(ConstraintError::ZeroVector { row: Some(i) });
        }
        let d = xi.dot(&x0i) / (r * r0);
        values[i] = delta - d;

        let r2 = r * r;
        for k in 0..q {
            jacobian[(i, i * q + k)] = -(x0i[k] / (r * r0) - d * xi[k] / r2);
        }

        let r3 = r2 * r;
        let r4 = r2 * r2;
        let mut h = DMatrix::zeros(q, q);
        for k in 0..q {
            for c in 0..q {
                let mut v = (xi[c] * x0i[k] + xi[k] * x0i[c]) / (r3 * r0)
                    - 3.0 * d * xi[k] * xi[c] / r4;
                if k == c {
                    v += d / r2;
                }
                h[(k, c)] = v;
            }
        }
        hessians.push(h);
    }

    Ok(ConstraintEval { values, jacobian, hessians })
}

/// Two points satisfying the similarity constraint whose midpoint violates
/// it, proving the feasible set is not convex. Exists when delta is negative
/// and q >= 2: pick a direction at similarity just above delta with negative
/// dot product against x0, and a coordinate permutation of it. Their midpoint
/// falls antiparallel to x0, similarity -1.
///
/// Requires x0 to have (numerically) equal entries, so that coordinate
/// permutations preserve the similarity. Returns (a, b, midpoint).
pub fn check_nonconvexity_witness(
    x0: &DVector<f64>,
    delta: f64,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), WitnessNotFound> {
    let q = x0.len();
    if q < 2 {
        return Err(WitnessNotFound { reason: "need at least two coordinates to permute".into() });
    }
    let c = x0[0];
    if c == 0.0 || x0.norm() < NORM_FLOOR {
        return Err(WitnessNotFound { reason: "origin is the zero vector".into() });
    }
    let spread = x0.iter().map(|v| (v - c).abs()).fold(0.0, f64::max);
    if spread > 1e-12 * c.abs().max(1.0) {
        return Err(WitnessNotFound { reason: "origin entries are not all equal".into() });
    }
    if !(delta > -1.0 && delta < 1.0) {
        return Err(WitnessNotFound { reason: format!("delta {delta} outside (-1, 1)") });
    }
    if delta >= 0.0 {
        // {x : d(x, x0) >= delta} is a convex cone for nonnegative delta;
        // no midpoint can escape it
        return Err(WitnessNotFound {
            reason: "feasible set is convex for nonnegative delta".into(),
        });
    }

    // target similarity strictly inside (delta, 0): feasible with margin
    let target = delta + 0.05 * (-delta).min(1.0 + delta);
    debug_assert!(target > delta && target < 0.0);

    // base = -sign(c) t 1 has similarity -1 with x0; adding a unit vector e
    // orthogonal to 1 lifts the similarity to exactly `target`
    let t = -target / (q as f64 * (1.0 - target * target)).sqrt();
    let base = -c.signum() * t;
    let r = std::f64::consts::FRAC_1_SQRT_2;

    let mut a = DVector::from_element(q, base);
    a[0] += r;
    a[1] -= r;
    let mut b = DVector::from_element(q, base);
    b[0] -= r;
    b[1] += r;
    let midpoint = DVector::from_element(q, base);

    Ok((a, b, midpoint))
}
