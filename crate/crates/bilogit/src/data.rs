//! File formats and synthetic data.
//!
//! Everything on disk is plain comma-separated or key=value text: corpus
//! files (timestamp, label, features), weight files (version header, one
//! weight per line), results tables, and flat config files. Floats are
//! written with the shortest round-tripping representation, so
//! load(save(x)) returns the exact stored values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::constraints::cosine_similarity;
use crate::objective::Weights;
use crate::pipeline::{
    AdversaryBudget, ExperimentConfig, ResultsTable, Variant, WarmStartKind,
};
use crate::problem::Dataset;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("file has no data rows")]
    EmptyFile,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, reason: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        reason: reason.into(),
    }
}

/// Parses a corpus: a header starting `timestamp,label,` followed by rows of
/// an integer timestamp, a 0/1 label, and q finite features. Blank lines are
/// skipped; anything else malformed is reported with its line number.
pub fn parse_corpus(text: &str) -> Result<Dataset, DataError> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(DataError::EmptyFile);
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0].trim() != "timestamp" || cols[1].trim() != "label" {
        return Err(parse_err(
            1,
            "header must name at least three columns starting timestamp,label",
        ));
    }
    let q = cols.len() - 2;

    let mut timestamps = Vec::new();
    let mut labels = Vec::new();
    let mut flat = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != q + 2 {
            return Err(parse_err(
                line_no,
                format!("expected {} fields, found {}", q + 2, fields.len()),
            ));
        }
        let ts: i64 = fields[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad timestamp {:?}: {e}", fields[0])))?;
        let label = match fields[1].trim() {
            "0" => 0.0,
            "1" => 1.0,
            other => return Err(parse_err(line_no, format!("label {other:?} is not 0 or 1"))),
        };
        for f in &fields[2..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|e| parse_err(line_no, format!("bad feature {f:?}: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("feature {f:?} is not finite")));
            }
            flat.push(v);
        }
        timestamps.push(ts);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(DataError::EmptyFile);
    }

    let rows = labels.len();
    Dataset::new(
        DMatrix::from_row_slice(rows, q, &flat),
        DVector::from_vec(labels),
        Some(timestamps),
    )
    .map_err(|errs| {
        parse_err(
            0,
            errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "),
        )
    })
}

pub fn load_corpus(path: &Path) -> Result<Dataset, DataError> {
    parse_corpus(&fs::read_to_string(path)?)
}

/// Writes a corpus in the load_corpus format. Rows missing timestamps get
/// their index.
pub fn save_corpus(path: &Path, data: &Dataset) -> Result<(), DataError> {
    let q = data.dim();
    let mut out = String::from("timestamp,label");
    for j in 1..=q {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for i in 0..data.len() {
        let ts = data.timestamps().map_or(i as i64, |t| t[i]);
        let _ = write!(out, "{ts},{}", data.labels()[i] as i64);
        for j in 0..q {
            let _ = write!(out, ",{}", data.features()[(i, j)]);
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

const MODEL_HEADER: &str = "bilogit-weights 1";

/// One weight per line under a version header.
pub fn save_model(path: &Path, w: &Weights) -> Result<(), DataError> {
    let mut out = String::from(MODEL_HEADER);
    out.push('\n');
    for v in w.as_vector().iter() {
        let _ = writeln!(out, "{v}");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Weights, DataError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(DataError::EmptyFile);
    };
    if header.trim() != MODEL_HEADER {
        return Err(parse_err(
            1,
            format!("expected header {MODEL_HEADER:?}, found {header:?}"),
        ));
    }
    let mut values = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let v: f64 = line
            .trim()
            .parse()
            .map_err(|e| parse_err(idx + 1, format!("bad weight {line:?}: {e}")))?;
        values.push(v);
    }
    if values.is_empty() {
        return Err(DataError::EmptyFile);
    }
    Weights::new(DVector::from_vec(values))
        .map_err(|e| parse_err(0, e.to_string()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| x.to_string())
}

/// Per-bucket results table: '#'-prefixed resolved config, a CSV header,
/// classic baseline rows (m = 0, delta = 0), then one row per grid
/// (variant, m, delta, start, bucket).
pub fn save_results(path: &Path, table: &ResultsTable, config: &str) -> Result<(), DataError> {
    let mut out = String::new();
    for line in config.lines() {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str("variant,m,delta,start,bucket,p4,residual,iterations,termination,wall_time\n");
    for (b, p4) in table.classic_bucket_p4.iter().enumerate() {
        let _ = writeln!(out, "classic,0,0,0,{},{},NaN,0,-,NaN", b + 1, fmt_opt(*p4));
    }
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant.as_str(),
            r.m,
            r.delta,
            r.start,
            r.bucket,
            fmt_opt(r.p4),
            r.residual,
            r.iterations,
            r.termination.as_str(),
            r.wall_time
        );
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-cell multi-start spread plus the winning cell, as CSV with the
/// resolved config and the winner in '#' comments.
pub fn save_summary(path: &Path, table: &ResultsTable, config: &str) -> Result<(), DataError> {
    let mut out = String::new();
    for line in config.lines() {
        let _ = writeln!(out, "# {line}");
    }
    let w = &table.winner;
    let _ = writeln!(
        out,
        "# winner m={} delta={} start={} mean_p4={}",
        w.m, w.delta, w.start, w.mean_p4
    );
    out.push_str("m,delta,defined_starts,median,p05,p95\n");
    for s in &table.summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.m,
            s.delta,
            s.defined_starts,
            fmt_opt(s.median),
            fmt_opt(s.p05),
            fmt_opt(s.p95)
        );
    }
    fs::write(path, out)?;
    Ok(())
}

fn fmt_f64_list(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_usize_list(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// The full experiment config as key=value lines; the exact inverse of
/// [parse_config] over defaults.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "seed={}", cfg.seed);
    let _ = writeln!(out, "train_size={}", cfg.train_size);
    let _ = writeln!(out, "test_partitions={}", cfg.test_partitions);
    match cfg.adversary_budget {
        AdversaryBudget::Count(c) => {
            let _ = writeln!(out, "adversary_count={c}");
        }
        AdversaryBudget::Fraction(f) => {
            let _ = writeln!(out, "adversary_fraction={f}");
        }
    }
    let _ = writeln!(out, "grid_m={}", fmt_usize_list(&cfg.grid_m));
    let _ = writeln!(out, "grid_delta={}", fmt_f64_list(&cfg.grid_delta));
    let _ = writeln!(out, "starts={}", cfg.starts);
    let _ = writeln!(out, "variant={}", cfg.variant.as_str());
    let _ = writeln!(
        out,
        "warm_start={}",
        match cfg.warm_start {
            WarmStartKind::Classic => "classic",
            WarmStartKind::Random => "random",
        }
    );
    match cfg.rho {
        Some(r) => {
            let _ = writeln!(out, "rho={r}");
        }
        None => {
            let _ = writeln!(out, "rho=none");
        }
    }
    let _ = writeln!(out, "normalize={}", cfg.normalize);
    let _ = writeln!(out, "threshold={}", cfg.threshold);
    let lm = &cfg.lm;
    let _ = writeln!(out, "lm_kappa={}", lm.kappa);
    let _ = writeln!(out, "lm_epsilon={}", lm.epsilon);
    let _ = writeln!(out, "lm_sigma={}", lm.sigma);
    let _ = writeln!(out, "lm_beta={}", lm.beta_ls);
    let _ = writeln!(out, "lm_rho1={}", lm.rho1);
    let _ = writeln!(out, "lm_rho2={}", lm.rho2);
    let _ = writeln!(out, "lm_gamma1={}", lm.gamma1);
    let _ = writeln!(out, "lm_gamma2={}", lm.gamma2);
    let _ = writeln!(out, "lm_eta={}", lm.eta);
    let _ = writeln!(out, "lm_stagnation_k={}", lm.stagnation_k);
    let _ = writeln!(out, "lm_max_iter={}", lm.max_iter);
    let _ = writeln!(out, "lm_max_backtracks={}", lm.max_backtracks);
    out
}

/// Applies key=value lines on top of `base`. '#' comments and blank lines
/// are skipped; unknown keys and malformed values are errors with line
/// numbers. Lists are comma-separated; rho accepts "none".
pub fn parse_config(text: &str, base: &ExperimentConfig) -> Result<ExperimentConfig, DataError> {
    let mut cfg = base.clone();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(parse_err(line_no, format!("expected key=value, found {line:?}")));
        };
        let key = key.trim();
        let value = value.trim();
        apply_config_pair(&mut cfg, key, value)
            .map_err(|reason| parse_err(line_no, reason))?;
    }
    Ok(cfg)
}

/// Sets one config key from its text value; shared by file parsing and flag
/// overrides.
pub fn apply_config_pair(
    cfg: &mut ExperimentConfig,
    key: &str,
    value: &str,
) -> Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        value
            .parse()
            .map_err(|e| format!("bad value {value:?} for {key}: {e}"))
    }
    fn f64_list(key: &str, value: &str) -> Result<Vec<f64>, String> {
        value.split(',').map(|v| num(key, v.trim())).collect()
    }
    fn usize_list(key: &str, value: &str) -> Result<Vec<usize>, String> {
        value.split(',').map(|v| num(key, v.trim())).collect()
    }

    match key {
        "seed" => cfg.seed = num(key, value)?,
        "train_size" => cfg.train_size = num(key, value)?,
        "test_partitions" => cfg.test_partitions = num(key, value)?,
        "adversary_count" => cfg.adversary_budget = AdversaryBudget::Count(num(key, value)?),
        "adversary_fraction" => {
            cfg.adversary_budget = AdversaryBudget::Fraction(num(key, value)?)
        }
        "grid_m" => cfg.grid_m = usize_list(key, value)?,
        "grid_delta" => cfg.grid_delta = f64_list(key, value)?,
        "starts" => cfg.starts = num(key, value)?,
        "variant" => cfg.variant = value.parse::<Variant>()?,
        "warm_start" => cfg.warm_start = value.parse::<WarmStartKind>()?,
        "rho" => {
            cfg.rho = if value == "none" {
                None
            } else {
                Some(num(key, value)?)
            }
        }
        "normalize" => cfg.normalize = num(key, value)?,
        "threshold" => cfg.threshold = num(key, value)?,
        "lm_kappa" => cfg.lm.kappa = num(key, value)?,
        "lm_epsilon" => cfg.lm.epsilon = num(key, value)?,
        "lm_sigma" => cfg.lm.sigma = num(key, value)?,
        "lm_beta" => cfg.lm.beta_ls = num(key, value)?,
        "lm_rho1" => cfg.lm.rho1 = num(key, value)?,
        "lm_rho2" => cfg.lm.rho2 = num(key, value)?,
        "lm_gamma1" => cfg.lm.gamma1 = num(key, value)?,
        "lm_gamma2" => cfg.lm.gamma2 = num(key, value)?,
        "lm_eta" => cfg.lm.eta = num(key, value)?,
        "lm_stagnation_k" => cfg.lm.stagnation_k = num(key, value)?,
        "lm_max_iter" => cfg.lm.max_iter = num(key, value)?,
        "lm_max_backtracks" => cfg.lm.max_backtracks = num(key, value)?,
        other => return Err(format!("unknown config key {other:?}")),
    }
    Ok(())
}

pub fn load_config(path: &Path, base: &ExperimentConfig) -> Result<ExperimentConfig, DataError> {
    parse_config(&fs::read_to_string(path)?, base)
}

/// Synthetic two-class corpus with time-indexed evasion drift.
///
/// Benign rows sit in a fixed Gaussian cluster. Malicious rows start in the
/// antipodal cluster and rotate toward the benign one as timestamps advance:
/// a row at horizon fraction s is its pre-drift draw rotated by
/// pi * drift_strength * s in a fixed plane, which keeps it within the
/// cosine ball cos(pi * drift_strength * s) of that draw. drift_strength is
/// therefore the fraction of the full benign-malicious angle swept by the
/// end of the horizon: 0 is stationary, 1 lands the malicious cluster on
/// the benign one. With one feature no rotation plane exists and the data
/// stays stationary.
///
/// Timestamps are 0..n_train+n_test-1; labels are fair coin flips. The same
/// seed always yields the same dataset.
pub fn generate_synthetic_drift(
    seed: u64,
    n_train: usize,
    n_test: usize,
    q: usize,
    drift_strength: f64,
) -> Dataset {
    assert!(n_train >= 1 && n_test >= 1 && q >= 1, "sizes must be at least 1");
    assert!(
        drift_strength >= 0.0 && drift_strength.is_finite(),
        "drift_strength must be finite and nonnegative"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| -> DVector<f64> {
        DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal))
    };

    let mut axis = gauss(&mut rng);
    while axis.norm() < 1e-9 {
        axis = gauss(&mut rng);
    }
    let axis = axis.normalize();
    // second plane axis, orthonormal to the first; absent in 1-D
    let coaxis = (q >= 2).then(|| loop {
        let g = gauss(&mut rng);
        let v = &g - axis.dot(&g) * &axis;
        if v.norm() > 1e-9 {
            break v.normalize();
        }
    });

    let benign_mean = 1.5 * &axis;
    let malicious_mean = -&benign_mean;
    let total = n_train + n_test;
    let noise = 0.5;

    let mut flat = Vec::with_capacity(total * q);
    let mut labels = Vec::with_capacity(total);
    let mut timestamps = Vec::with_capacity(total);
    for t in 0..total {
        let s = t as f64 / (total - 1) as f64;
        let malicious = rng.random_bool(0.5);
        let x = if malicious {
            let pre = &malicious_mean + noise * gauss(&mut rng);
            match &coaxis {
                Some(u2) => {
                    let theta = std::f64::consts::PI * drift_strength * s;
                    let a = axis.dot(&pre);
                    let b = u2.dot(&pre);
                    let residue = &pre - a * &axis - b * u2;
                    let rotated = residue
                        + (a * theta.cos() - b * theta.sin()) * &axis
                        + (a * theta.sin() + b * theta.cos()) * u2;
                    debug_assert!(
                        cosine_similarity(&rotated, &pre).unwrap_or(1.0) >= theta.cos() - 1e-9,
                        "rotation must respect its own cosine ball"
                    );
                    rotated
                }
                None => pre,
            }
        } else {
            &benign_mean + noise * gauss(&mut rng)
        };
        flat.extend(x.iter());
        labels.push(if malicious { 1.0 } else { 0.0 });
        timestamps.push(t as i64);
    }

    Dataset::new(
        DMatrix::from_row_slice(total, q, &flat),
        DVector::from_vec(labels),
        Some(timestamps),
    )
    .expect("generated rows are finite with binary labels")
}
