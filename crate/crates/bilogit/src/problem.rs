//! Problem data: the static training set, the adversary's sample, and the
//! hyperparameters tying them together. All types validate on construction;
//! anything holding one of these can assume its invariants.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// A violation of a problem invariant. `validate_problem` reports every
/// violation it finds, not just the first.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("adversary origin row {row} is the zero vector")]
    ZeroOriginRow { row: usize },
    #[error("dimension mismatch: {what}")]
    DimensionMismatch { what: String },
    #[error("similarity threshold {delta} outside the open interval (-1, 1)")]
    DeltaOutOfRange { delta: f64 },
    #[error("label at row {row} is {value}, expected exactly 0 or 1")]
    NonBinaryLabel { row: usize, value: f64 },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("ridge scale {rho} must be positive")]
    NonPositiveRidge { rho: f64 },
    #[error("{what} must be nonempty")]
    Empty { what: String },
}

/// Rows are instances, columns are the q feature dimensions. Labels are
/// exactly 0.0 or 1.0. Timestamps, when present, are an opaque orderable key
/// (one per row); no calendar semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    labels: DVector<f64>,
    timestamps: Option<Vec<i64>>,
}

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        labels: DVector<f64>,
        timestamps: Option<Vec<i64>>,
    ) -> Result<Self, Vec<ProblemError>> {
        let mut errors = Vec::new();
        if features.nrows() == 0 {
            errors.push(ProblemError::Empty { what: "dataset rows".into() });
        }
        if features.ncols() == 0 {
            errors.push(ProblemError::Empty { what: "feature dimension".into() });
        }
        if features.nrows() != labels.len() {
            errors.push(ProblemError::DimensionMismatch {
                what: format!("{} feature rows vs {} labels", features.nrows(), labels.len()),
            });
        }
        if let Some(ts) = &timestamps {
            if ts.len() != features.nrows() {
                errors.push(ProblemError::DimensionMismatch {
                    what: format!("{} feature rows vs {} timestamps", features.nrows(), ts.len()),
                });
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            errors.push(ProblemError::NonFinite { what: "features".into() });
        }
        for (row, &value) in labels.iter().enumerate() {
            if value != 0.0 && value != 1.0 {
                errors.push(ProblemError::NonBinaryLabel { row, value });
            }
        }
        if errors.is_empty() {
            Ok(Self { features, labels, timestamps })
        } else {
            Err(errors)
        }
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    pub fn timestamps(&self) -> Option<&[i64]> {
        self.timestamps.as_deref()
    }

    /// Number of instances.
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature dimension q.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// New dataset holding the given rows, in the given order.
    /// Panics if an index is out of range (caller bug).
    pub fn select(&self, indices: &[usize]) -> Self {
        let features = DMatrix::from_fn(indices.len(), self.dim(), |r, c| {
            self.features[(indices[r], c)]
        });
        let labels = DVector::from_fn(indices.len(), |r, _| self.labels[indices[r]]);
        let timestamps = self
            .timestamps
            .as_ref()
            .map(|ts| indices.iter().map(|&i| ts[i]).collect());
        // invariants inherited from self; constructor re-check cannot fail on a subset
        Self { features, labels, timestamps }
    }
}

/// The adversary's instances: where they started (`origin`, immutable during a
/// solve) and where they currently sit (`current`). Labels follow the
/// malicious-class convention: every adversary instance carries label 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarySample {
    origin: DMatrix<f64>,
    current: DMatrix<f64>,
    labels: DVector<f64>,
}

impl AdversarySample {
    pub fn new(
        origin: DMatrix<f64>,
        current: DMatrix<f64>,
        labels: DVector<f64>,
    ) -> Result<Self, Vec<ProblemError>> {
        let sample = Self { origin, current, labels };
        let errors = sample.violations();
        if errors.is_empty() {
            Ok(sample)
        } else {
            Err(errors)
        }
    }

    /// Sample whose current data still sits at its origin.
    pub fn from_origin(origin: DMatrix<f64>, labels: DVector<f64>) -> Result<Self, Vec<ProblemError>> {
        let current = origin.clone();
        Self::new(origin, current, labels)
    }

    fn violations(&self) -> Vec<ProblemError> {
        let mut errors = Vec::new();
        if self.origin.nrows() == 0 {
            errors.push(ProblemError::Empty { what: "adversary sample".into() });
        }
        if self.origin.shape() != self.current.shape() {
            errors.push(ProblemError::DimensionMismatch {
                what: format!(
                    "origin {}x{} vs current {}x{}",
                    self.origin.nrows(),
                    self.origin.ncols(),
                    self.current.nrows(),
                    self.current.ncols()
                ),
            });
        }
        if self.labels.len() != self.origin.nrows() {
            errors.push(ProblemError::DimensionMismatch {
                what: format!("{} adversary rows vs {} labels", self.origin.nrows(), self.labels.len()),
            });
        }
        if self.origin.iter().any(|v| !v.is_finite()) || self.current.iter().any(|v| !v.is_finite()) {
            errors.push(ProblemError::NonFinite { what: "adversary data".into() });
        }
        for row in 0..self.origin.nrows() {
            if self.origin.row(row).iter().all(|&v| v == 0.0) {
                errors.push(ProblemError::ZeroOriginRow { row });
            }
        }
        for (row, &value) in self.labels.iter().enumerate() {
            if value != 1.0 {
                errors.push(ProblemError::NonBinaryLabel { row, value });
            }
        }
        errors
    }

    pub fn origin(&self) -> &DMatrix<f64> {
        &self.origin
    }

    pub fn current(&self) -> &DMatrix<f64> {
        &self.current
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    /// Number of adversary instances m.
    pub fn len(&self) -> usize {
        self.origin.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same origin and labels, different current data. Validates the new data.
    pub fn with_current(&self, current: DMatrix<f64>) -> Result<Self, Vec<ProblemError>> {
        Self::new(self.origin.clone(), current, self.labels.clone())
    }
}

/// Scalar knobs of the bilevel program.
///
/// `delta` is the similarity floor the adversary must respect, strictly inside
/// (-1, 1). `rho` scales the ridge term (None disables it). `normalize`
/// divides loss sums by their instance counts; it defaults to on and exists so
/// the un-normalized objective variant stays expressible.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    delta: f64,
    rho: Option<f64>,
    m: usize,
    normalize: bool,
}

impl HyperParams {
    pub fn new(delta: f64, rho: Option<f64>, m: usize) -> Result<Self, Vec<ProblemError>> {
        let mut errors = Vec::new();
        if !(delta > -1.0 && delta < 1.0) {
            errors.push(ProblemError::DeltaOutOfRange { delta });
        }
        if let Some(rho) = rho {
            if !(rho > 0.0) || !rho.is_finite() {
                errors.push(ProblemError::NonPositiveRidge { rho });
            }
        }
        if m == 0 {
            errors.push(ProblemError::Empty { what: "adversary sample size m".into() });
        }
        if errors.is_empty() {
            Ok(Self { delta, rho, m, normalize: true })
        } else {
            Err(errors)
        }
    }

    pub fn with_normalization(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn rho(&self) -> Option<f64> {
        self.rho
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }
}

/// The full program data: static set (D, gamma), adversary sample (X0, X, Y),
/// and hyperparameters. Only obtainable through validation, so holders may
/// assume every invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct BilevelProblem {
    static_data: Dataset,
    adversary: AdversarySample,
    params: HyperParams,
}

impl BilevelProblem {
    pub fn new(
        static_data: Dataset,
        adversary: AdversarySample,
        params: HyperParams,
    ) -> Result<Self, Vec<ProblemError>> {
        validate_problem(Self { static_data, adversary, params })
    }

    pub fn static_data(&self) -> &Dataset {
        &self.static_data
    }

    pub fn adversary(&self) -> &AdversarySample {
        &self.adversary
    }

    pub fn params(&self) -> &HyperParams {
        &self.params
    }

    /// Static instance count.
    pub fn n(&self) -> usize {
        self.static_data.len()
    }

    /// Adversary instance count.
    pub fn m(&self) -> usize {
        self.adversary.len()
    }

    /// Feature dimension.
    pub fn q(&self) -> usize {
        self.static_data.dim()
    }

    /// Same problem with the adversary's current data replaced.
    pub fn with_adversary_current(&self, current: DMatrix<f64>) -> Result<Self, Vec<ProblemError>> {
        let adversary = self.adversary.with_current(current)?;
        Self::new(self.static_data.clone(), adversary, self.params.clone())
    }
}

/// Checks every invariant of the assembled problem and returns it unchanged
/// when all hold, otherwise the complete list of violations. Idempotent:
/// validating an already validated problem returns it identically.
pub fn validate_problem(p: BilevelProblem) -> Result<BilevelProblem, Vec<ProblemError>> {
    let mut errors = Vec::new();

    // component invariants (types normally enforce them, but this is the
    // single authoritative gate, so re-check)
    if p.static_data.len() == 0 {
        errors.push(ProblemError::Empty { what: "static dataset".into() });
    }
    for (row, &value) in p.static_data.labels().iter().enumerate() {
        if value != 0.0 && value != 1.0 {
            errors.push(ProblemError::NonBinaryLabel { row, value });
        }
    }
    errors.extend(p.adversary.violations());
    if !(p.params.delta > -1.0 && p.params.delta < 1.0) {
        errors.push(ProblemError::DeltaOutOfRange { delta: p.params.delta });
    }
    if let Some(rho) = p.params.rho {
        if !(rho > 0.0) || !rho.is_finite() {
            errors.push(ProblemError::NonPositiveRidge { rho });
        }
    }

    // cross invariants
    if p.static_data.dim() != p.adversary.origin().ncols() {
        errors.push(ProblemError::DimensionMismatch {
            what: format!(
                "static q={} vs adversary q={}",
                p.static_data.dim(),
                p.adversary.origin().ncols()
            ),
        });
    }
    if p.params.m != p.adversary.len() {
        errors.push(ProblemError::DimensionMismatch {
            what: format!("params m={} vs adversary rows {}", p.params.m, p.adversary.len()),
        });
    }

    if errors.is_empty() {
        Ok(p)
    } else {
        Err(errors)
    }
}
