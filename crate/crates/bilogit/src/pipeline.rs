//! End-to-end training: chronological splitting, the classic baseline fit,
//! bilevel solves with warm or random starts, and the (m, delta) grid search
//! with multi-start statistics.
//!
//! Every random choice flows from one top-level seed. Grid tasks derive their
//! own stream from (seed, m index, delta index, start index), so the full
//! grid output is a pure function of (data, config) regardless of how the
//! tasks are scheduled.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::metrics::p4_score;
use crate::objective::{sigmoid_z, Weights, PROB_CLAMP};
use crate::problem::{AdversarySample, BilevelProblem, Dataset, HyperParams, ProblemError};
use crate::solver::{lm_solve, LMConfig, SolveReport, Termination};
use crate::stationarity::StationarityPoint;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("need at least {need} rows, have {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("chronological split needs timestamps on every row")]
    MissingTimestamps,
    #[error("adversary seed needs {need} nonzero malicious rows, found {have}")]
    NotEnoughMaliciousRows { have: usize, need: usize },
    #[error("training data contains a single class")]
    SingleClassData,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid problem: {}", format_problem_errors(.0))]
    Problem(Vec<ProblemError>),
    #[error("every grid cell produced an undefined score")]
    AllScoresUndefined,
}

fn format_problem_errors(errs: &[ProblemError]) -> String {
    errs.iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Constrained,
    Unconstrained,
    ClassicOnly,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Constrained => "constrained",
            Variant::Unconstrained => "unconstrained",
            Variant::ClassicOnly => "classic",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constrained" => Ok(Variant::Constrained),
            "unconstrained" => Ok(Variant::Unconstrained),
            "classic" => Ok(Variant::ClassicOnly),
            other => Err(format!(
                "unknown variant {other:?} (expected constrained, unconstrained, or classic)"
            )),
        }
    }
}

/// Where the learner's weights start a bilevel solve.
#[derive(Debug, Clone)]
pub enum WarmStart {
    /// Fixed start, typically the classic baseline fit.
    Weights(Weights),
    /// Standard normal draw from the task's stream.
    Random,
}

/// Config-level warm start selector; resolved to a [WarmStart] once the
/// classic baseline is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmStartKind {
    Classic,
    Random,
}

impl std::str::FromStr for WarmStartKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "classic" => Ok(WarmStartKind::Classic),
            "random" => Ok(WarmStartKind::Random),
            other => Err(format!(
                "unknown warm start {other:?} (expected classic or random)"
            )),
        }
    }
}

/// How many malicious training rows seed the adversary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdversaryBudget {
    Count(usize),
    /// Fraction of the available malicious rows, rounded half up, at least 1.
    Fraction(f64),
}

impl AdversaryBudget {
    pub fn resolve(&self, malicious_rows: usize) -> usize {
        match *self {
            AdversaryBudget::Count(c) => c,
            AdversaryBudget::Fraction(f) => ((f * malicious_rows as f64).round() as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Earliest rows kept for training.
    pub train_size: usize,
    /// Number of chronological test buckets K.
    pub test_partitions: usize,
    /// Adversary seed size for single train runs; the grid uses grid_m.
    pub adversary_budget: AdversaryBudget,
    pub grid_m: Vec<usize>,
    pub grid_delta: Vec<f64>,
    /// Multi-starts per grid cell.
    pub starts: usize,
    pub seed: u64,
    pub variant: Variant,
    pub warm_start: WarmStartKind,
    /// Ridge strength 1/rho; None disables the ridge term.
    pub rho: Option<f64>,
    /// Mean-normalize the objectives (divide by n and m).
    pub normalize: bool,
    /// Classification threshold for P4 accounting.
    pub threshold: f64,
    pub lm: LMConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_size: 200,
            test_partitions: 4,
            adversary_budget: AdversaryBudget::Count(2),
            grid_m: vec![1, 2, 5, 10],
            grid_delta: vec![0.9, 0.99, 0.999],
            starts: 1,
            seed: 42,
            variant: Variant::Constrained,
            warm_start: WarmStartKind::Classic,
            rho: Some(100.0),
            normalize: true,
            threshold: 0.5,
            lm: LMConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::InvalidConfig(msg));
        if self.train_size == 0 {
            return bad("train_size must be at least 1".into());
        }
        if self.test_partitions == 0 {
            return bad("test_partitions must be at least 1".into());
        }
        match self.adversary_budget {
            AdversaryBudget::Count(0) => return bad("adversary count must be at least 1".into()),
            AdversaryBudget::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return bad(format!("adversary fraction {f} outside (0,1]"));
            }
            _ => {}
        }
        if self.grid_m.is_empty() || self.grid_delta.is_empty() {
            return bad("grid_m and grid_delta must be nonempty".into());
        }
        if let Some(&m) = self.grid_m.iter().find(|&&m| m == 0) {
            return bad(format!("grid m value {m} must be at least 1"));
        }
        if let Some(&d) = self
            .grid_delta
            .iter()
            .find(|&&d| !(d > -1.0 && d < 1.0))
        {
            return bad(format!("grid delta value {d} outside (-1,1)"));
        }
        if self.starts == 0 {
            return bad("starts must be at least 1".into());
        }
        if let Some(r) = self.rho {
            if !(r > 0.0) {
                return bad(format!("rho {r} must be positive"));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0,1)", self.threshold));
        }
        self.lm
            .validate()
            .map_err(PipelineError::InvalidConfig)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Classic,
    BilevelConstrained { m: usize, delta: f64 },
    BilevelUnconstrained { m: usize },
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub weights: Weights,
    pub provenance: Provenance,
    /// Present exactly when provenance is bilevel.
    pub solve_report: Option<SolveReport>,
    /// The adversary's final data matrix from a bilevel solve.
    pub adversary_final: Option<DMatrix<f64>>,
}

/// splitmix64; decorrelates derived seeds from sequential tags.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable sub-stream seed for (base, tags); every run component that draws
/// randomness gets its own tag path under the top-level seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    s
}

/// Sorts by timestamp (stable, so ties keep file order), takes the earliest
/// `train_size` rows for training, and cuts the rest into K contiguous
/// buckets whose sizes differ by at most one.
pub fn chronological_split(
    data: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<(Dataset, Vec<Dataset>), PipelineError> {
    let Some(ts) = data.timestamps() else {
        return Err(PipelineError::MissingTimestamps);
    };
    let k = cfg.test_partitions;
    let need = cfg.train_size + k;
    if data.len() < need {
        return Err(PipelineError::InsufficientData {
            have: data.len(),
            need,
        });
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| ts[i]);

    let train = data.select(&order[..cfg.train_size]);
    let rest = &order[cfg.train_size..];
    let base = rest.len() / k;
    let extra = rest.len() % k;
    let mut buckets = Vec::with_capacity(k);
    let mut at = 0;
    for b in 0..k {
        let size = base + usize::from(b < extra);
        buckets.push(data.select(&rest[at..at + size]));
        at += size;
    }
    Ok((train, buckets))
}

/// Samples `m` malicious rows uniformly without replacement to seed the
/// adversary, returning the remaining rows as the static set. Zero-feature
/// rows are never candidates. The static set and the seed partition the
/// training set exactly.
pub fn select_adversary_rows(
    train: &Dataset,
    m: usize,
    rng: &mut impl Rng,
) -> Result<(Dataset, AdversarySample), PipelineError> {
    let candidates: Vec<usize> = (0..train.len())
        .filter(|&i| train.labels()[i] == 1.0 && train.features().row(i).norm() > 0.0)
        .collect();
    if candidates.len() < m {
        return Err(PipelineError::NotEnoughMaliciousRows {
            have: candidates.len(),
            need: m,
        });
    }

    let picks = rand::seq::index::sample(rng, candidates.len(), m);
    let chosen: Vec<usize> = picks.iter().map(|j| candidates[j]).collect();
    let mut taken = vec![false; train.len()];
    for &i in &chosen {
        taken[i] = true;
    }
    let static_rows: Vec<usize> = (0..train.len()).filter(|&i| !taken[i]).collect();

    assert_eq!(
        static_rows.len() + chosen.len(),
        train.len(),
        "static set and adversary seed must partition the training set"
    );

    let q = train.dim();
    let origin = DMatrix::from_fn(m, q, |r, c| train.features()[(chosen[r], c)]);
    let sample = AdversarySample::from_origin(origin, DVector::from_element(m, 1.0))
        .map_err(PipelineError::Problem)?;
    Ok((train.select(&static_rows), sample))
}

/// Budget-resolving wrapper around [select_adversary_rows].
pub fn select_adversary_seed(
    train: &Dataset,
    cfg: &ExperimentConfig,
    rng: &mut impl Rng,
) -> Result<(Dataset, AdversarySample), PipelineError> {
    let malicious = (0..train.len())
        .filter(|&i| train.labels()[i] == 1.0 && train.features().row(i).norm() > 0.0)
        .count();
    select_adversary_rows(train, cfg.adversary_budget.resolve(malicious), rng)
}

/// Fits plain logistic regression (optionally ridge-penalized) by gradient
/// descent with a backtracking line search, stopping at gradient norm 1e-6
/// or 1e5 iterations. The loss is mean-normalized, so duplicating the data
/// leaves the fit unchanged.
pub fn train_classic(
    train: &Dataset,
    rho: Option<f64>,
    rng: &mut impl Rng,
) -> Result<TrainedClassifier, PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::InsufficientData { have: 0, need: 1 });
    }
    let labels = train.labels();
    if !(labels.iter().any(|&y| y == 1.0) && labels.iter().any(|&y| y == 0.0)) {
        return Err(PipelineError::SingleClassData);
    }
    if let Some(r) = rho {
        if !(r > 0.0) {
            return Err(PipelineError::InvalidConfig(format!(
                "rho {r} must be positive"
            )));
        }
    }

    let q = train.dim();
    let n = train.len() as f64;
    let feats = train.features();

    let loss_of = |w: &DVector<f64>| -> f64 {
        let mut loss = 0.0;
        for i in 0..train.len() {
            let z: f64 = (0..q).map(|j| feats[(i, j)] * w[j]).sum();
            let p = sigmoid_z(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= labels[i] * p.ln() + (1.0 - labels[i]) * (1.0 - p).ln();
        }
        loss /= n;
        if let Some(r) = rho {
            loss += w.norm_squared() / r;
        }
        loss
    };
    let grad_of = |w: &DVector<f64>| -> DVector<f64> {
        let mut grad = DVector::zeros(q);
        for i in 0..train.len() {
            let z: f64 = (0..q).map(|j| feats[(i, j)] * w[j]).sum();
            let c = sigmoid_z(z) - labels[i];
            for j in 0..q {
                grad[j] += c * feats[(i, j)];
            }
        }
        grad /= n;
        if let Some(r) = rho {
            grad += (2.0 / r) * w;
        }
        grad
    };

    let mut w = DVector::from_fn(q, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
    let mut loss = loss_of(&w);
    let mut grad = grad_of(&w);
    let mut t = 1.0f64;
    for _ in 0..100_000 {
        let gn = grad.norm();
        if gn <= 1e-6 {
            break;
        }
        let gsq = gn * gn;
        let mut accepted = false;
        for _ in 0..200 {
            let cand = &w - t * &grad;
            let cl = loss_of(&cand);
            if cl <= loss - 1e-4 * t * gsq {
                w = cand;
                loss = cl;
                grad = grad_of(&w);
                t *= 2.0;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // step length underflow: the descent left in the gradient is
            // below what f64 arithmetic can realize
            break;
        }
    }

    Ok(TrainedClassifier {
        weights: Weights::new(w).map_err(|e| PipelineError::Problem(vec![e]))?,
        provenance: Provenance::Classic,
        solve_report: None,
        adversary_final: None,
    })
}

/// The full training set a bilevel problem was carved from: static rows plus
/// the adversary's origin rows (malicious labels).
pub fn union_training_set(p: &BilevelProblem) -> Dataset {
    let d = p.static_data();
    let q = p.q();
    let total = p.n() + p.m();
    let feats = DMatrix::from_fn(total, q, |r, c| {
        if r < p.n() {
            d.features()[(r, c)]
        } else {
            p.adversary().origin()[(r - p.n(), c)]
        }
    });
    let labels = DVector::from_fn(total, |r, _| {
        if r < p.n() {
            d.labels()[r]
        } else {
            1.0
        }
    });
    Dataset::new(feats, labels, None).expect("a valid problem yields a valid union set")
}

/// Solves the stationarity system from a warm or random start and extracts
/// the learner's weights and the adversary's final data. The unconstrained
/// variant keeps only the lambda multiplier; ClassicOnly ignores the solver
/// and fits the baseline on the reunited training set.
///
/// Start assembly draws from `rng` in a fixed order: weights (random mode
/// only, standard normal), then all multipliers uniform on [0,1).
pub fn train_bilevel(
    p: &BilevelProblem,
    variant: Variant,
    warm_start: &WarmStart,
    cfg: &LMConfig,
    rng: &mut impl Rng,
) -> Result<TrainedClassifier, PipelineError> {
    if variant == Variant::ClassicOnly {
        return train_classic(&union_training_set(p), p.params().rho(), rng);
    }

    let (q, m) = (p.q(), p.m());
    let w0: DVector<f64> = match warm_start {
        WarmStart::Weights(w) => {
            if w.len() != q {
                return Err(PipelineError::InvalidConfig(format!(
                    "warm start has {} weights, problem has {q} features",
                    w.len()
                )));
            }
            w.as_vector().clone()
        }
        WarmStart::Random => DVector::from_fn(q, |_, _| rng.sample(StandardNormal)),
    };

    let mut z = DVector::zeros(q + m * q);
    z.rows_mut(0, q).copy_from(&w0);
    for i in 0..m {
        for j in 0..q {
            z[q + i * q + j] = p.adversary().origin()[(i, j)];
        }
    }

    let start = match variant {
        Variant::Constrained => {
            let zeta = DVector::from_fn(2 * m + 1, |_, _| rng.random::<f64>());
            StationarityPoint::new(z, zeta, q, m)
        }
        Variant::Unconstrained => {
            let lambda = rng.random::<f64>();
            StationarityPoint::unconstrained(z, lambda, q, m)
        }
        Variant::ClassicOnly => unreachable!(),
    }
    .expect("start assembled with matching shapes");

    let report = lm_solve(&start, p, cfg);
    let weights = report.final_point.weights();
    let adversary_final = report.final_point.x_matrix();
    let provenance = match variant {
        Variant::Constrained => Provenance::BilevelConstrained {
            m,
            delta: p.params().delta(),
        },
        Variant::Unconstrained => Provenance::BilevelUnconstrained { m },
        Variant::ClassicOnly => unreachable!(),
    };
    Ok(TrainedClassifier {
        weights,
        provenance,
        solve_report: Some(report),
        adversary_final: Some(adversary_final),
    })
}

/// P4 per bucket; None marks an undefined score.
pub fn evaluate_buckets(w: &Weights, buckets: &[Dataset], threshold: f64) -> Vec<Option<f64>> {
    buckets.iter().map(|b| p4_score(w, b, threshold)).collect()
}

/// One (variant, m, delta, start, bucket) record of the grid output.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub variant: Variant,
    pub m: usize,
    pub delta: f64,
    pub start: usize,
    /// 1-based bucket index.
    pub bucket: usize,
    pub p4: Option<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub wall_time: f64,
}

/// Multi-start spread of one grid cell: median and 5%/95% percentiles of the
/// per-start mean P4 (mean over the buckets where P4 is defined).
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub m: usize,
    pub delta: f64,
    pub median: Option<f64>,
    pub p05: Option<f64>,
    pub p95: Option<f64>,
    /// Starts whose mean P4 was defined and entered the statistics.
    pub defined_starts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WinnerKey {
    pub m: usize,
    pub delta: f64,
    pub start: usize,
    pub mean_p4: f64,
}

#[derive(Debug, Clone)]
pub struct ResultsTable {
    pub rows: Vec<ResultsRow>,
    pub summaries: Vec<CellSummary>,
    /// Baseline P4 per bucket for the classic fit on the same split.
    pub classic_bucket_p4: Vec<Option<f64>>,
    pub winner: WinnerKey,
    /// Undefined-score exclusions, for the caller to surface.
    pub warnings: Vec<String>,
}

pub struct GridOutcome {
    pub table: ResultsTable,
    pub best: TrainedClassifier,
}

/// Linear-interpolation percentile of an ascending slice; p in [0,1].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty slice");
    assert!((0.0..=1.0).contains(&p), "percentile level outside [0,1]");
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// True when candidate a ranks above b: higher mean P4, ties broken by
/// smaller m, then larger delta, then lower start index.
fn outranks(a: &WinnerKey, b: &WinnerKey) -> bool {
    if a.mean_p4 != b.mean_p4 {
        return a.mean_p4 > b.mean_p4;
    }
    if a.m != b.m {
        return a.m < b.m;
    }
    if a.delta != b.delta {
        return a.delta > b.delta;
    }
    a.start < b.start
}

struct CellRun {
    m: usize,
    delta: f64,
    start: usize,
    rows: Vec<ResultsRow>,
    mean_p4: Option<f64>,
    classifier: TrainedClassifier,
    warnings: Vec<String>,
}

/// Trains and evaluates every (m, delta, start) cell of the grid on the
/// chronological split, returning per-bucket rows, per-cell multi-start
/// summaries, and the best classifier under the documented tie-break.
///
/// Cells run concurrently; results merge in grid order, so the output is
/// identical for any worker count.
pub fn grid_search(data: &Dataset, cfg: &ExperimentConfig) -> Result<GridOutcome, PipelineError> {
    cfg.validate()?;
    let variant = match cfg.variant {
        Variant::ClassicOnly => {
            return Err(PipelineError::InvalidConfig(
                "grid search needs an adversarial variant (constrained or unconstrained)".into(),
            ));
        }
        v => v,
    };

    let (train, buckets) = chronological_split(data, cfg)?;

    let mut classic_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let classic = train_classic(&train, cfg.rho, &mut classic_rng)?;
    let classic_bucket_p4 = evaluate_buckets(&classic.weights, &buckets, cfg.threshold);

    struct Task {
        m_idx: usize,
        delta_idx: usize,
        start: usize,
    }
    let mut tasks = Vec::new();
    for m_idx in 0..cfg.grid_m.len() {
        for delta_idx in 0..cfg.grid_delta.len() {
            for start in 0..cfg.starts {
                tasks.push(Task {
                    m_idx,
                    delta_idx,
                    start,
                });
            }
        }
    }

    let runs: Vec<CellRun> = tasks
        .into_par_iter()
        .map(|task| -> Result<CellRun, PipelineError> {
            let m = cfg.grid_m[task.m_idx];
            let delta = cfg.grid_delta[task.delta_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                &[1, task.m_idx as u64, task.delta_idx as u64, task.start as u64],
            ));

            let (static_set, x0) = select_adversary_rows(&train, m, &mut rng)?;
            let params = HyperParams::new(delta, cfg.rho, m)
                .map_err(PipelineError::Problem)?
                .with_normalization(cfg.normalize);
            let problem = BilevelProblem::new(static_set, x0, params)
                .map_err(PipelineError::Problem)?;

            let warm = match cfg.warm_start {
                WarmStartKind::Classic => WarmStart::Weights(classic.weights.clone()),
                WarmStartKind::Random => WarmStart::Random,
            };
            let classifier = train_bilevel(&problem, variant, &warm, &cfg.lm, &mut rng)?;
            let bucket_p4 = evaluate_buckets(&classifier.weights, &buckets, cfg.threshold);

            let report = classifier
                .solve_report
                .as_ref()
                .expect("bilevel training always carries a report");
            let residual = *report
                .residual_history
                .last()
                .expect("residual history is never empty");

            let mut warnings = Vec::new();
            let rows: Vec<ResultsRow> = bucket_p4
                .iter()
                .enumerate()
                .map(|(b, &p4)| {
                    if p4.is_none() {
                        warnings.push(format!(
                            "m={m} delta={delta} start={} bucket={}: P4 undefined, excluded from means",
                            task.start,
                            b + 1
                        ));
                    }
                    ResultsRow {
                        variant,
                        m,
                        delta,
                        start: task.start,
                        bucket: b + 1,
                        p4,
                        residual,
                        iterations: report.iterations,
                        termination: report.termination,
                        wall_time: report.wall_time,
                    }
                })
                .collect();

            Ok(CellRun {
                m,
                delta,
                start: task.start,
                rows,
                mean_p4: mean_defined(&bucket_p4),
                classifier,
                warnings,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (b, p4) in classic_bucket_p4.iter().enumerate() {
        if p4.is_none() {
            warnings.push(format!(
                "classic baseline bucket {}: P4 undefined, excluded from means",
                b + 1
            ));
        }
    }
    for run in &runs {
        rows.extend(run.rows.iter().cloned());
        warnings.extend(run.warnings.iter().cloned());
    }

    let mut summaries = Vec::new();
    for &m in &cfg.grid_m {
        for &delta in &cfg.grid_delta {
            let mut means: Vec<f64> = runs
                .iter()
                .filter(|r| r.m == m && r.delta == delta)
                .filter_map(|r| r.mean_p4)
                .collect();
            means.sort_by(f64::total_cmp);
            let total = cfg.starts;
            if means.len() < total {
                warnings.push(format!(
                    "m={m} delta={delta}: {} of {total} starts had undefined mean P4",
                    total - means.len()
                ));
            }
            let stat = |p: f64| (!means.is_empty()).then(|| percentile(&means, p));
            summaries.push(CellSummary {
                m,
                delta,
                median: stat(0.5),
                p05: stat(0.05),
                p95: stat(0.95),
                defined_starts: means.len(),
            });
        }
    }

    let mut winner: Option<(WinnerKey, usize)> = None;
    for (idx, run) in runs.iter().enumerate() {
        let Some(mean) = run.mean_p4 else { continue };
        let key = WinnerKey {
            m: run.m,
            delta: run.delta,
            start: run.start,
            mean_p4: mean,
        };
        if winner.as_ref().is_none_or(|(best, _)| outranks(&key, best)) {
            winner = Some((key, idx));
        }
    }
    let Some((winner, best_idx)) = winner else {
        return Err(PipelineError::AllScoresUndefined);
    };
    let best = runs[best_idx].classifier.clone();

    Ok(GridOutcome {
        table: ResultsTable {
            rows,
            summaries,
            classic_bucket_p4,
            winner,
            warnings,
        },
        best,
    })
}
