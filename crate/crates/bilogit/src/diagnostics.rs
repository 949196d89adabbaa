//! Self-check harnesses behind the CLI: finite-difference validation of the
//! analytic derivatives on seeded random instances, and runnable
//! demonstrations of the two structural facts about the lower level (equal
//! loss under coordinate mass shifts; nonconvexity of the feasible set).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::constraints::{check_nonconvexity_witness, eval_constraints};
use crate::objective::{
    gradients_at, lower_objective_at, upper_objective_at, Weights,
};
use crate::pipeline::derive_seed;
use crate::problem::{AdversarySample, BilevelProblem, Dataset, HyperParams};
use crate::stationarity::multiple_optima_witness;

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub entries: usize,
}

#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub blocks: Vec<BlockReport>,
    pub tol: f64,
    pub trials: usize,
}

impl DerivativeReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err <= self.tol)
    }
}

/// |a - b| relative to max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

fn gauss_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn gauss_mat_rows_clear_of_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        loop {
            let row = gauss_vec(rng, cols);
            // short rows blow up the curvature of the cosine terms; random
            // instances stay clear so difference quotients stay meaningful
            if row.norm() >= 0.3 {
                m.row_mut(i).copy_from(&row.transpose());
                break;
            }
        }
    }
    m
}

/// A seeded random problem instance at modest size (q <= 5, m <= 4, n <= 6),
/// with the adversary's current data perturbed off its origin, plus a weight
/// vector to differentiate at.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (BilevelProblem, Weights) {
    let q = rng.random_range(1..=5);
    let m = rng.random_range(1..=4);
    let n = rng.random_range(1..=6);

    let feats = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let labels = DVector::from_fn(n, |_, _| f64::from(rng.random_bool(0.5)));
    let static_data = Dataset::new(feats, labels, None).expect("finite features, binary labels");

    let origin = gauss_mat_rows_clear_of_zero(rng, m, q);
    let current = &origin + 0.1 * DMatrix::from_fn(m, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let adversary = AdversarySample::new(origin, current, DVector::from_element(m, 1.0))
        .expect("nonzero origin rows with malicious labels");

    let delta = rng.random_range(-0.9..0.9);
    let rho = Some(rng.random_range(5.0..500.0));
    let params = HyperParams::new(delta, rho, m).expect("delta and rho in range");
    let problem = BilevelProblem::new(static_data, adversary, params).expect("consistent shapes");

    let w = Weights::new(gauss_vec(rng, q)).expect("finite weights");
    (problem, w)
}

struct MaxTracker {
    name: &'static str,
    max: f64,
    entries: usize,
}

impl MaxTracker {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            max: 0.0,
            entries: 0,
        }
    }
    fn see(&mut self, analytic: f64, numeric: f64) {
        self.max = self.max.max(rel_err(analytic, numeric));
        self.entries += 1;
    }
    fn report(self) -> BlockReport {
        BlockReport {
            name: self.name,
            max_rel_err: self.max,
            entries: self.entries,
        }
    }
}

/// Compares every analytic derivative block against central finite
/// differences on `trials` seeded random instances. First derivatives
/// difference the objectives; second derivatives difference the analytic
/// gradients. Constraint derivatives difference the constraint values and
/// Jacobian rows.
pub fn run_derivative_check(trials: usize, tol: f64, seed: u64) -> DerivativeReport {
    let h = 1e-6;
    let mut f_w = MaxTracker::new("upper gradient w");
    let mut f_x = MaxTracker::new("upper gradient X");
    let mut l_w = MaxTracker::new("lower gradient w");
    let mut l_x = MaxTracker::new("lower gradient X");
    let mut f_ww = MaxTracker::new("upper hessian ww");
    let mut f_wx = MaxTracker::new("upper hessian wX");
    let mut f_xx = MaxTracker::new("upper hessian XX");
    let mut l_ww = MaxTracker::new("lower hessian ww");
    let mut l_wx = MaxTracker::new("lower hessian wX");
    let mut l_xx = MaxTracker::new("lower hessian XX");
    let mut g_jac = MaxTracker::new("constraint jacobian");
    let mut g_hess = MaxTracker::new("constraint hessians");

    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, trial as u64]));
        let (p, w) = random_instance(&mut rng);
        let q = p.q();
        let m = p.m();
        let x = p.adversary().current().clone();
        let bundle = gradients_at(&w, &x, &p);

        let wv = w.as_vector().clone();
        let with_w = |v: &DVector<f64>| Weights::new(v.clone()).expect("finite perturbation");

        // first derivatives against the objectives
        for a in 0..q {
            let mut lo = wv.clone();
            let mut hi = wv.clone();
            lo[a] -= h;
            hi[a] += h;
            let fd_f = (upper_objective_at(&with_w(&hi), &x, &p)
                - upper_objective_at(&with_w(&lo), &x, &p))
                / (2.0 * h);
            let fd_l = (lower_objective_at(&with_w(&hi), &x, &p)
                - lower_objective_at(&with_w(&lo), &x, &p))
                / (2.0 * h);
            f_w.see(bundle.upper_w[a], fd_f);
            l_w.see(bundle.lower_w[a], fd_l);
        }
        for i in 0..m {
            for j in 0..q {
                let mut lo = x.clone();
                let mut hi = x.clone();
                lo[(i, j)] -= h;
                hi[(i, j)] += h;
                let fd_f =
                    (upper_objective_at(&w, &hi, &p) - upper_objective_at(&w, &lo, &p)) / (2.0 * h);
                let fd_l =
                    (lower_objective_at(&w, &hi, &p) - lower_objective_at(&w, &lo, &p)) / (2.0 * h);
                f_x.see(bundle.upper_x[(i, j)], fd_f);
                l_x.see(bundle.lower_x[(i, j)], fd_l);
            }
        }

        // second derivatives against the analytic gradients
        for a in 0..q {
            let mut lo = wv.clone();
            let mut hi = wv.clone();
            lo[a] -= h;
            hi[a] += h;
            let ghi = gradients_at(&with_w(&hi), &x, &p);
            let glo = gradients_at(&with_w(&lo), &x, &p);
            for b in 0..q {
                f_ww.see(bundle.upper_ww[(b, a)], (ghi.upper_w[b] - glo.upper_w[b]) / (2.0 * h));
                l_ww.see(bundle.lower_ww[(b, a)], (ghi.lower_w[b] - glo.lower_w[b]) / (2.0 * h));
            }
        }
        for i in 0..m {
            for b in 0..q {
                let mut lo = x.clone();
                let mut hi = x.clone();
                lo[(i, b)] -= h;
                hi[(i, b)] += h;
                let ghi = gradients_at(&w, &hi, &p);
                let glo = gradients_at(&w, &lo, &p);
                let col = i * q + b;
                for a in 0..q {
                    f_wx.see(bundle.upper_wx[(a, col)], (ghi.upper_w[a] - glo.upper_w[a]) / (2.0 * h));
                    l_wx.see(bundle.lower_wx[(a, col)], (ghi.lower_w[a] - glo.lower_w[a]) / (2.0 * h));
                }
                let fhi = ghi.upper_x_flat();
                let flo = glo.upper_x_flat();
                let lhi = ghi.lower_x_flat();
                let llo = glo.lower_x_flat();
                for r in 0..m * q {
                    f_xx.see(bundle.upper_xx[(r, col)], (fhi[r] - flo[r]) / (2.0 * h));
                    l_xx.see(bundle.lower_xx[(r, col)], (lhi[r] - llo[r]) / (2.0 * h));
                }
            }
        }

        // constraint derivatives against the constraint values and jacobian
        let x0 = p.adversary().origin();
        let delta = p.params().delta();
        let ce = eval_constraints(&x, x0, delta).expect("rows stay clear of zero");
        for i in 0..m {
            for k in 0..q {
                let mut lo = x.clone();
                let mut hi = x.clone();
                lo[(i, k)] -= h;
                hi[(i, k)] += h;
                let vhi = eval_constraints(&hi, x0, delta).expect("perturbed rows stay nonzero");
                let vlo = eval_constraints(&lo, x0, delta).expect("perturbed rows stay nonzero");
                let col = i * q + k;
                g_jac.see(ce.jacobian[(i, col)], (vhi.values[i] - vlo.values[i]) / (2.0 * h));
                for c in 0..q {
                    g_hess.see(
                        ce.hessians[i][(c, k)],
                        (vhi.jacobian[(i, i * q + c)] - vlo.jacobian[(i, i * q + c)]) / (2.0 * h),
                    );
                }
            }
        }
    }

    DerivativeReport {
        blocks: vec![
            f_w.report(),
            f_x.report(),
            l_w.report(),
            l_x.report(),
            f_ww.report(),
            f_wx.report(),
            f_xx.report(),
            l_ww.report(),
            l_wx.report(),
            l_xx.report(),
            g_jac.report(),
            g_hess.report(),
        ],
        tol,
        trials,
    }
}

#[derive(Debug, Clone)]
pub struct OptimaWitness {
    pub q: usize,
    pub m: usize,
    pub delta: f64,
    pub f_star: f64,
    pub f_prime: f64,
    pub both_feasible: bool,
}

impl OptimaWitness {
    pub fn gap(&self) -> f64 {
        (self.f_star - self.f_prime).abs()
    }
    pub fn holds(&self) -> bool {
        self.gap() <= 1e-12 && self.both_feasible
    }
}

/// Builds `trials` seeded random (w, X) pairs, applies the coordinate mass
/// shift that leaves every w.X_i unchanged, and reports the loss gap plus
/// feasibility of both matrices at a delta chosen below their similarity.
pub fn distinct_optima_demo(trials: usize, seed: u64) -> Result<Vec<OptimaWitness>, String> {
    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, trial as u64]));
        let q = rng.random_range(2..=4);
        let m = rng.random_range(1..=3);

        // weights clear of zero keep the shift ratio w_k / w_j bounded
        let w = Weights::new(DVector::from_fn(q, |_, _| loop {
            let v: f64 = rng.sample(StandardNormal);
            if v.abs() >= 0.1 {
                break v;
            }
        }))
        .expect("finite weights");

        let x_star = gauss_mat_rows_clear_of_zero(&mut rng, m, q);
        let feats = DMatrix::from_fn(1, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let static_data = Dataset::new(feats, DVector::from_element(1, 0.0), None)
            .expect("one benign row");
        let adversary =
            AdversarySample::from_origin(x_star.clone(), DVector::from_element(m, 1.0))
                .expect("rows are clear of zero");
        // probe delta; replaced below once the witness similarity is known
        let params = HyperParams::new(0.0, None, m).expect("probe delta in range");
        let p = BilevelProblem::new(static_data, adversary, params).expect("consistent shapes");

        let (x_a, x_b) = multiple_optima_witness(&w, &p).map_err(|e| e.reason)?;

        // both matrices stay feasible for any delta below their similarity
        // to the origin X*; sit 0.05 under the worst row
        let worst = (0..m)
            .map(|i| {
                let sim = |mat: &DMatrix<f64>| {
                    crate::constraints::cosine_similarity(
                        &mat.row(i).transpose(),
                        &x_star.row(i).transpose(),
                    )
                    .expect("rows are nonzero")
                };
                sim(&x_a).min(sim(&x_b))
            })
            .fold(f64::INFINITY, f64::min);
        let delta = (worst - 0.05).clamp(-0.999, 0.999);

        let p = BilevelProblem::new(
            p.static_data().clone(),
            p.adversary().clone(),
            HyperParams::new(delta, None, m).expect("delta in range"),
        )
        .expect("consistent shapes");

        let f_star = lower_objective_at(&w, &x_a, &p);
        let f_prime = lower_objective_at(&w, &x_b, &p);
        let feasible = |mat: &DMatrix<f64>| {
            eval_constraints(mat, &x_star, delta)
                .map(|ce| ce.values.iter().all(|&v| v <= 1e-12))
                .unwrap_or(false)
        };
        out.push(OptimaWitness {
            q,
            m,
            delta,
            f_star,
            f_prime,
            both_feasible: feasible(&x_a) && feasible(&x_b),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct NonconvexityWitness {
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub midpoint: DVector<f64>,
    pub g_a: f64,
    pub g_b: f64,
    pub g_mid: f64,
}

impl NonconvexityWitness {
    /// Both endpoints feasible, midpoint infeasible by a clear margin.
    pub fn holds(&self) -> bool {
        self.g_a <= 1e-12 && self.g_b <= 1e-12 && self.g_mid >= 1e-6
    }
}

/// Two feasible points around `x0` whose midpoint violates the similarity
/// constraint, demonstrating the feasible set is not convex for negative
/// delta.
pub fn nonconvexity_demo(x0: &DVector<f64>, delta: f64) -> Result<NonconvexityWitness, String> {
    let (a, b, midpoint) = check_nonconvexity_witness(x0, delta).map_err(|e| e.reason)?;
    let g_of = |v: &DVector<f64>| -> Result<f64, String> {
        let mat = DMatrix::from_row_slice(1, v.len(), v.as_slice());
        let origin = DMatrix::from_row_slice(1, x0.len(), x0.as_slice());
        eval_constraints(&mat, &origin, delta)
            .map(|ce| ce.values[0])
            .map_err(|e| e.to_string())
    };
    Ok(NonconvexityWitness {
        g_a: g_of(&a)?,
        g_b: g_of(&b)?,
        g_mid: g_of(&midpoint)?,
        a,
        b,
        midpoint,
    })
}
