//! Shared oracle code for the integration tests.
//!
//! Everything here is written from the mathematical definitions with plain
//! loops, deliberately not calling the library's derivative or diagnostic
//! code, so the tests compare two independent routes to the same numbers.

#![allow(dead_code)]

use bilogit::objective::Weights;
use bilogit::problem::{AdversarySample, BilevelProblem, Dataset, HyperParams};
use bilogit::solver::ResidualSystem;
use bilogit::stationarity::{fb, fb_newton_derivative, ResidualEval};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// |a - b| scaled by the larger magnitude, floored at 1 so tiny values
/// compare absolutely.
pub fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central-difference gradient of a scalar function.
pub fn central_diff<F: FnMut(&DVector<f64>) -> f64>(
    mut f: F,
    u: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    DVector::from_fn(u.len(), |k, _| {
        let mut up = u.clone();
        let mut dn = u.clone();
        up[k] += h;
        dn[k] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    })
}

/// Central-difference Jacobian of a vector function, rows indexing outputs.
pub fn central_jacobian<F: FnMut(&DVector<f64>) -> DVector<f64>>(
    mut f: F,
    u: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    let probe = f(u);
    let mut jac = DMatrix::zeros(probe.len(), u.len());
    for k in 0..u.len() {
        let mut up = u.clone();
        let mut dn = u.clone();
        up[k] += h;
        dn[k] -= h;
        let col = (f(&up) - f(&dn)) / (2.0 * h);
        jac.set_column(k, &col);
    }
    jac
}

pub fn sigmoid_ref(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Cross-entropy with the same probability clamp the library documents.
pub fn bce_ref(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn cosine_ref(x: &DVector<f64>, x0: &DVector<f64>) -> f64 {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut n0 = 0.0;
    for k in 0..x.len() {
        dot += x[k] * x0[k];
        nx += x[k] * x[k];
        n0 += x0[k] * x0[k];
    }
    dot / (nx.sqrt() * n0.sqrt())
}

/// Upper objective from its definition: mean learner loss on the static
/// data, mean learner loss on the adversary rows, plus ||w||^2 / rho.
pub fn upper_ref(w: &DVector<f64>, x: &DMatrix<f64>, p: &BilevelProblem) -> f64 {
    let d = p.static_data().features();
    let gamma = p.static_data().labels();
    let labels = p.adversary().labels();
    let (n, m) = (p.n(), p.m());
    let norm = p.params().normalize();

    let mut static_sum = 0.0;
    for i in 0..n {
        let mut z = 0.0;
        for j in 0..p.q() {
            z += w[j] * d[(i, j)];
        }
        static_sum += bce_ref(sigmoid_ref(z), gamma[i]);
    }
    let mut adv_sum = 0.0;
    for i in 0..m {
        let mut z = 0.0;
        for j in 0..p.q() {
            z += w[j] * x[(i, j)];
        }
        adv_sum += bce_ref(sigmoid_ref(z), labels[i]);
    }
    let mut total = if norm {
        static_sum / n as f64 + adv_sum / m as f64
    } else {
        static_sum + adv_sum
    };
    if let Some(rho) = p.params().rho() {
        total += w.iter().map(|v| v * v).sum::<f64>() / rho;
    }
    total
}

/// Lower objective from its definition: mean adversary loss, which is the
/// learner loss with flipped labels.
pub fn lower_ref(w: &DVector<f64>, x: &DMatrix<f64>, p: &BilevelProblem) -> f64 {
    let labels = p.adversary().labels();
    let m = p.m();
    let mut sum = 0.0;
    for i in 0..m {
        let mut z = 0.0;
        for j in 0..p.q() {
            z += w[j] * x[(i, j)];
        }
        sum += bce_ref(sigmoid_ref(z), 1.0 - labels[i]);
    }
    if p.params().normalize() {
        sum / m as f64
    } else {
        sum
    }
}

/// Random instance with every quantity bounded away from the singular
/// configurations: weights and features away from zero, delta well inside
/// (-1, 1).
pub fn random_problem(
    rng: &mut ChaCha8Rng,
    n: usize,
    m: usize,
    q: usize,
) -> (BilevelProblem, Weights) {
    let bounded = |rng: &mut ChaCha8Rng| -> f64 {
        let mag = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    };
    let feats = DMatrix::from_fn(n, q, |_, _| bounded(rng));
    let labels = DVector::from_fn(n, |i, _| {
        // both classes guaranteed present
        if i < 2 {
            i as f64
        } else {
            f64::from(rng.random_bool(0.5))
        }
    });
    let data = Dataset::new(feats, labels, None).expect("static data is valid");

    let origin = DMatrix::from_fn(m, q, |_, _| bounded(rng));
    let adv_labels = DVector::from_element(m, 1.0);
    let mut sample = AdversarySample::from_origin(origin, adv_labels).expect("sample is valid");
    // nudge the current data off the origin so the constraint is active
    let current = sample.current() + DMatrix::from_fn(m, q, |_, _| rng.random_range(-0.05..0.05));
    if current.row_iter().all(|r| r.norm() > 0.1) {
        sample = sample.with_current(current).expect("perturbed sample is valid");
    }

    let delta = rng.random_range(-0.5..0.5);
    let rho = if rng.random_bool(0.5) {
        Some(rng.random_range(10.0..200.0))
    } else {
        None
    };
    let params = HyperParams::new(delta, rho, m).expect("params are valid");
    let problem = BilevelProblem::new(data, sample, params).expect("problem is valid");

    let w = DVector::from_fn(q, |_, _| bounded(rng));
    (problem, Weights::new(w).expect("weights are finite"))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst entrywise relative gap between two equally shaped matrices.
pub fn max_rel_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "comparing mismatched shapes");
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        worst = worst.max(rel_gap(*x, *y));
    }
    worst
}

/// A mixed complementarity system with a known solution: p variables x,
/// s(x) = Qx + c with Q positive definite, residual rows fb(x_i, s_i(x))
/// followed by `eqs` linear equations a_j.x = a_j.x*. The construction picks
/// an active set first, then back-solves c, so x* is a root by design.
pub struct ToyNcp {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub eqs: Vec<DVector<f64>>,
    pub rhs: Vec<f64>,
    pub solution: DVector<f64>,
}

impl ToyNcp {
    pub fn random(rng: &mut ChaCha8Rng, p: usize, eqs: usize) -> Self {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        let mut q = &a.transpose() * &a;
        for i in 0..p {
            q[(i, i)] += 1.0;
        }
        // each index is either active (x* pinned at 0, slack positive) or
        // inactive (x* positive, slack 0)
        let mut solution = DVector::zeros(p);
        let mut slack = DVector::zeros(p);
        for i in 0..p {
            if rng.random_bool(0.5) {
                slack[i] = rng.random_range(0.2..2.0);
            } else {
                solution[i] = rng.random_range(0.2..2.0);
            }
        }
        let c = &slack - &q * &solution;
        let eqs_v: Vec<DVector<f64>> = (0..eqs)
            .map(|_| DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let rhs = eqs_v.iter().map(|a| a.dot(&solution)).collect();
        Self { q, c, eqs: eqs_v, rhs, solution }
    }

    fn slack(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x + &self.c
    }
}

impl ResidualSystem for ToyNcp {
    fn unknowns(&self) -> usize {
        self.solution.len()
    }

    fn residuals(&self) -> usize {
        self.solution.len() + self.eqs.len()
    }

    fn eval(&self, u: &DVector<f64>) -> Option<ResidualEval> {
        let p = self.unknowns();
        let s = self.slack(u);
        let mut phi = DVector::zeros(self.residuals());
        let mut jac = DMatrix::zeros(self.residuals(), p);
        for i in 0..p {
            phi[i] = fb(u[i], s[i]);
            let (da, db) = fb_newton_derivative(u[i], s[i]);
            for k in 0..p {
                jac[(i, k)] = db * self.q[(i, k)];
            }
            jac[(i, i)] += da;
        }
        for (j, a) in self.eqs.iter().enumerate() {
            phi[p + j] = a.dot(u) - self.rhs[j];
            for k in 0..p {
                jac[(p + j, k)] = a[k];
            }
        }
        phi.iter().all(|v| v.is_finite()).then(|| ResidualEval::new(phi, jac))
    }
}

/// Deterministic labeled dataset for metric and pipeline tests: class means
/// at +/- mu on the first axis, fair labels, timestamps in file order.
pub fn two_class_data(rng: &mut ChaCha8Rng, rows: usize, q: usize, mu: f64) -> Dataset {
    let labels = DVector::from_fn(rows, |i, _| {
        if i < 2 {
            i as f64
        } else {
            f64::from(rng.random_bool(0.5))
        }
    });
    let feats = DMatrix::from_fn(rows, q, |i, j| {
        let center = if j == 0 {
            if labels[i] == 1.0 {
                -mu
            } else {
                mu
            }
        } else {
            0.0
        };
        center + rng.random_range(-0.5..0.5)
    });
    let ts = (0..rows as i64).collect();
    Dataset::new(feats, labels, Some(ts)).expect("generated data is valid")
}
