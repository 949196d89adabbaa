//! C ABI over the core trainer.
//!
//! Handles are opaque pointers owned by this library: everything returned by
//! a `*_new`, `*_load`, or `*_train*` function must be released with the
//! matching `*_free`. Fallible calls report through a `BilogitStatus` out
//! parameter (or return value) and return null or NaN on failure. Feature
//! matrices cross the boundary as row-major `double` arrays. No call below
//! lets a Rust panic cross the boundary.
//!
//! The generated header lives at include/bilogit.h.

use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bilogit::data::{load_corpus, load_model, save_model, DataError};
use bilogit::metrics::confusion;
use bilogit::objective::{sigmoid, Weights};
use bilogit::pipeline::{
    derive_seed, select_adversary_rows, train_bilevel, train_classic, Variant, WarmStart,
};
use bilogit::problem::{BilevelProblem, Dataset, HyperParams};
use bilogit::solver::{LMConfig, Termination};

/// Outcome of a call. Anything but OK leaves outputs untouched unless the
/// function documents otherwise.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BilogitStatus {
    Ok = 0,
    /// Null pointer, bad dimension, or an argument outside its range.
    InvalidArgument = 1,
    /// A file's contents did not match its format.
    ParseError = 2,
    /// The solver stopped without an acceptable point.
    SolverFailed = 3,
    /// The requested metric has no defined value on this data.
    UndefinedMetric = 4,
    IoError = 5,
    /// An internal invariant broke; the call was contained.
    Internal = 6,
}

/// Labeled feature rows with optional timestamps.
pub struct BilogitDataset(Dataset);

/// Trained logistic-regression weights.
pub struct BilogitModel(Weights);

fn set_status(out: *mut BilogitStatus, s: BilogitStatus) {
    if !out.is_null() {
        unsafe { *out = s };
    }
}

fn data_error_status(e: &DataError) -> BilogitStatus {
    match e {
        DataError::Io(_) => BilogitStatus::IoError,
        _ => BilogitStatus::ParseError,
    }
}

unsafe fn path_from(ptr: *const c_char) -> Option<&'static str> {
    if ptr.is_null() {
        return None;
    }
    CStr::from_ptr(ptr).to_str().ok()
}

/// Version of this library as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn bilogit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds a dataset from row-major features, one 0/1 label per row, and
/// optional timestamps (null for none). Copies everything; the caller keeps
/// ownership of the input buffers.
///
/// # Safety
/// `features` must point to rows*cols doubles, `labels` to rows doubles, and
/// `timestamps` to rows 64-bit integers when non-null.
#[no_mangle]
pub unsafe extern "C" fn bilogit_dataset_new(
    features: *const f64,
    labels: *const f64,
    timestamps: *const i64,
    rows: usize,
    cols: usize,
    status: *mut BilogitStatus,
) -> *mut BilogitDataset {
    set_status(status, BilogitStatus::InvalidArgument);
    if features.is_null() || labels.is_null() || rows == 0 || cols == 0 {
        return ptr::null_mut();
    }
    let Some(total) = rows.checked_mul(cols) else {
        return ptr::null_mut();
    };
    let feats = DMatrix::from_row_slice(rows, cols, slice::from_raw_parts(features, total));
    let labs = DVector::from_column_slice(slice::from_raw_parts(labels, rows));
    let ts = (!timestamps.is_null()).then(|| slice::from_raw_parts(timestamps, rows).to_vec());
    match Dataset::new(feats, labs, ts) {
        Ok(ds) => {
            set_status(status, BilogitStatus::Ok);
            Box::into_raw(Box::new(BilogitDataset(ds)))
        }
        Err(_) => ptr::null_mut(),
    }
}

/// Loads a corpus file (timestamp, label, features with a header row).
///
/// # Safety
/// `path` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bilogit_dataset_load(
    path: *const c_char,
    status: *mut BilogitStatus,
) -> *mut BilogitDataset {
    set_status(status, BilogitStatus::InvalidArgument);
    let Some(path) = path_from(path) else {
        return ptr::null_mut();
    };
    match load_corpus(path.as_ref()) {
        Ok(ds) => {
            set_status(status, BilogitStatus::Ok);
            Box::into_raw(Box::new(BilogitDataset(ds)))
        }
        Err(e) => {
            set_status(status, data_error_status(&e));
            ptr::null_mut()
        }
    }
}

/// Number of rows; 0 on null.
#[no_mangle]
pub unsafe extern "C" fn bilogit_dataset_rows(ds: *const BilogitDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Number of feature columns; 0 on null.
#[no_mangle]
pub unsafe extern "C" fn bilogit_dataset_cols(ds: *const BilogitDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.dim())
}

/// Releases a dataset. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn bilogit_dataset_free(ds: *mut BilogitDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

fn rho_option(rho: f64) -> Option<f64> {
    (rho > 0.0 && rho.is_finite()).then_some(rho)
}

/// Fits the plain logistic baseline. `rho` > 0 enables the ridge penalty
/// with that divisor; any other value disables it.
///
/// # Safety
/// `ds` must be a live dataset handle or null.
#[no_mangle]
pub unsafe extern "C" fn bilogit_train_classic(
    ds: *const BilogitDataset,
    rho: f64,
    seed: u64,
    status: *mut BilogitStatus,
) -> *mut BilogitModel {
    set_status(status, BilogitStatus::InvalidArgument);
    let Some(ds) = ds.as_ref() else {
        return ptr::null_mut();
    };
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        train_classic(&ds.0, rho_option(rho), &mut rng)
    }));
    match outcome {
        Ok(Ok(c)) => {
            set_status(status, BilogitStatus::Ok);
            Box::into_raw(Box::new(BilogitModel(c.weights)))
        }
        Ok(Err(_)) => ptr::null_mut(),
        Err(_) => {
            set_status(status, BilogitStatus::Internal);
            ptr::null_mut()
        }
    }
}

/// Trains against the worst-case adversary: seeds `m` malicious rows from
/// the dataset, warm-starts at the classic fit, and solves the stationarity
/// system. `constrained` nonzero keeps the cosine-similarity budget `delta`;
/// zero trains the unconstrained variant (delta is then ignored but must
/// still be a finite number). `rho` as in bilogit_train_classic.
///
/// Null with BILOGIT_STATUS_SOLVER_FAILED means the iteration stopped
/// without an acceptable point.
///
/// # Safety
/// `ds` must be a live dataset handle or null.
#[no_mangle]
pub unsafe extern "C" fn bilogit_train_bilevel(
    ds: *const BilogitDataset,
    delta: f64,
    m: usize,
    rho: f64,
    seed: u64,
    constrained: c_int,
    status: *mut BilogitStatus,
) -> *mut BilogitModel {
    set_status(status, BilogitStatus::InvalidArgument);
    let Some(ds) = ds.as_ref() else {
        return ptr::null_mut();
    };
    if !(delta > -1.0 && delta < 1.0) || m == 0 {
        return ptr::null_mut();
    }
    let variant = if constrained != 0 {
        Variant::Constrained
    } else {
        Variant::Unconstrained
    };
    let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<_, BilogitStatus> {
        let mut classic_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
        let classic = train_classic(&ds.0, rho_option(rho), &mut classic_rng)
            .map_err(|_| BilogitStatus::InvalidArgument)?;

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
        let (static_set, x0) = select_adversary_rows(&ds.0, m, &mut rng)
            .map_err(|_| BilogitStatus::InvalidArgument)?;
        let params = HyperParams::new(delta, rho_option(rho), m)
            .map_err(|_| BilogitStatus::InvalidArgument)?;
        let problem = BilevelProblem::new(static_set, x0, params)
            .map_err(|_| BilogitStatus::InvalidArgument)?;

        let classifier = train_bilevel(
            &problem,
            variant,
            &WarmStart::Weights(classic.weights),
            &LMConfig::default(),
            &mut rng,
        )
        .map_err(|_| BilogitStatus::InvalidArgument)?;
        let termination = classifier
            .solve_report
            .as_ref()
            .expect("bilevel training carries a report")
            .termination;
        match termination {
            Termination::Converged | Termination::Stagnated => Ok(classifier.weights),
            _ => Err(BilogitStatus::SolverFailed),
        }
    }));
    match outcome {
        Ok(Ok(w)) => {
            set_status(status, BilogitStatus::Ok);
            Box::into_raw(Box::new(BilogitModel(w)))
        }
        Ok(Err(s)) => {
            set_status(status, s);
            ptr::null_mut()
        }
        Err(_) => {
            set_status(status, BilogitStatus::Internal);
            ptr::null_mut()
        }
    }
}

/// Loads a saved model file.
///
/// # Safety
/// `path` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bilogit_model_load(
    path: *const c_char,
    status: *mut BilogitStatus,
) -> *mut BilogitModel {
    set_status(status, BilogitStatus::InvalidArgument);
    let Some(path) = path_from(path) else {
        return ptr::null_mut();
    };
    match load_model(path.as_ref()) {
        Ok(w) => {
            set_status(status, BilogitStatus::Ok);
            Box::into_raw(Box::new(BilogitModel(w)))
        }
        Err(e) => {
            set_status(status, data_error_status(&e));
            ptr::null_mut()
        }
    }
}

/// Writes a model file (version header, one weight per line).
///
/// # Safety
/// `model` must be a live model handle or null; `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn bilogit_model_save(
    model: *const BilogitModel,
    path: *const c_char,
) -> BilogitStatus {
    let Some(model) = model.as_ref() else {
        return BilogitStatus::InvalidArgument;
    };
    let Some(path) = path_from(path) else {
        return BilogitStatus::InvalidArgument;
    };
    match save_model(path.as_ref(), &model.0) {
        Ok(()) => BilogitStatus::Ok,
        Err(e) => data_error_status(&e),
    }
}

/// Number of weights; 0 on null.
#[no_mangle]
pub unsafe extern "C" fn bilogit_model_dim(model: *const BilogitModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.len())
}

/// Copies the weights into `out`, which must hold exactly
/// bilogit_model_dim(model) doubles.
///
/// # Safety
/// `model` must be a live model handle or null; `out` must point to `len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn bilogit_model_weights(
    model: *const BilogitModel,
    out: *mut f64,
    len: usize,
) -> BilogitStatus {
    let Some(model) = model.as_ref() else {
        return BilogitStatus::InvalidArgument;
    };
    if out.is_null() || len != model.0.len() {
        return BilogitStatus::InvalidArgument;
    }
    let dst = slice::from_raw_parts_mut(out, len);
    dst.copy_from_slice(model.0.as_vector().as_slice());
    BilogitStatus::Ok
}

/// Sigmoid score of one feature vector; NaN on error.
///
/// # Safety
/// `model` must be a live model handle or null; `features` must point to
/// `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bilogit_predict(
    model: *const BilogitModel,
    features: *const f64,
    len: usize,
    status: *mut BilogitStatus,
) -> f64 {
    set_status(status, BilogitStatus::InvalidArgument);
    let Some(model) = model.as_ref() else {
        return f64::NAN;
    };
    if features.is_null() || len != model.0.len() {
        return f64::NAN;
    }
    let x = DVector::from_column_slice(slice::from_raw_parts(features, len));
    if x.iter().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    set_status(status, BilogitStatus::Ok);
    sigmoid(&model.0, &x)
}

/// P4 score of the model on a dataset at the given threshold. Writes the
/// score to `out`; BILOGIT_STATUS_UNDEFINED_METRIC (with `out` = NaN) when
/// the denominator vanishes.
///
/// # Safety
/// `model` and `ds` must be live handles or null; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bilogit_p4(
    model: *const BilogitModel,
    ds: *const BilogitDataset,
    threshold: f64,
    out: *mut f64,
) -> BilogitStatus {
    let (Some(model), Some(ds)) = (model.as_ref(), ds.as_ref()) else {
        return BilogitStatus::InvalidArgument;
    };
    if out.is_null() || !(threshold > 0.0 && threshold < 1.0) || model.0.len() != ds.0.dim() {
        return BilogitStatus::InvalidArgument;
    }
    match confusion(&model.0, &ds.0, threshold).p4() {
        Some(v) => {
            *out = v;
            BilogitStatus::Ok
        }
        None => {
            *out = f64::NAN;
            BilogitStatus::UndefinedMetric
        }
    }
}

/// Releases a model. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn bilogit_model_free(model: *mut BilogitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
