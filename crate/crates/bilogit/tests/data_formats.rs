//! On-disk formats: corpus and model round trips, results and summary
//! tables, config application, and the synthetic drift generator.

mod common;

use approx::assert_relative_eq;
use bilogit::data::{
    apply_config_pair, generate_synthetic_drift, load_corpus, load_model, parse_corpus,
    save_corpus, save_model, save_results, save_summary, DataError,
};
use bilogit::objective::Weights;
use bilogit::pipeline::{
    CellSummary, ExperimentConfig, ResultsRow, ResultsTable, Variant, WinnerKey,
};
use bilogit::problem::Dataset;
use bilogit::solver::Termination;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tempfile::tempdir;

#[test]
fn corpus_round_trip_is_bitwise_exact() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("corpus.csv");
    let feats = DMatrix::from_row_slice(
        3,
        2,
        &[
            0.1 + 0.2, // 0.30000000000000004 survives the trip
            -1.5e-300,
            7.25e300,
            f64::MIN_POSITIVE,
            -0.0,
            1.0 / 3.0,
        ],
    );
    let labels = DVector::from_vec(vec![1.0, 0.0, 1.0]);
    let data = Dataset::new(feats, labels, Some(vec![-5, 0, 9_000_000_000])).unwrap();

    save_corpus(&path, &data).unwrap();
    let back = load_corpus(&path).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.dim(), 2);
    assert_eq!(back.timestamps().unwrap(), data.timestamps().unwrap());
    assert_eq!(back.labels(), data.labels());
    for i in 0..3 {
        for j in 0..2 {
            assert_eq!(
                back.features()[(i, j)].to_bits(),
                data.features()[(i, j)].to_bits(),
                "feature ({i},{j}) changed across the round trip"
            );
        }
    }
}

#[test]
fn corpus_without_timestamps_gets_row_indices() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("c.csv");
    let data = Dataset::new(
        DMatrix::from_row_slice(2, 1, &[4.0, 5.0]),
        DVector::from_vec(vec![0.0, 1.0]),
        None,
    )
    .unwrap();
    save_corpus(&path, &data).unwrap();
    let back = load_corpus(&path).unwrap();
    assert_eq!(back.timestamps().unwrap(), &vec![0, 1]);
}

#[test]
fn corpus_parse_errors_carry_line_numbers() {
    let reject = |text: &str, want_line: usize, want_substr: &str| {
        match parse_corpus(text) {
            Err(DataError::Parse { line, reason }) => {
                assert_eq!(line, want_line, "wrong line for {want_substr:?}: {reason}");
                assert!(
                    reason.contains(want_substr),
                    "reason {reason:?} missing {want_substr:?}"
                );
            }
            other => panic!("expected parse error containing {want_substr:?}, got {other:?}"),
        }
    };

    reject("time,label,f1\n0,1,2.0\n", 1, "header");
    reject("timestamp,label,f1\n0,1\n", 2, "fields");
    reject("timestamp,label,f1\n0,1,2.0,9.0\n", 2, "fields");
    reject("timestamp,label,f1\n0,1,2.0\nxyz,0,1.0\n", 3, "timestamp");
    reject("timestamp,label,f1\n0,2,2.0\n", 2, "label");
    reject("timestamp,label,f1\n0,1.0,2.0\n", 2, "label");
    reject("timestamp,label,f1\n0,-1,2.0\n", 2, "label");
    reject("timestamp,label,f1\n0,1,inf\n", 2, "finite");
    reject("timestamp,label,f1\n0,1,NaN\n", 2, "finite");
    reject("timestamp,label,f1\n0,1,two\n", 2, "feature");

    assert!(matches!(parse_corpus(""), Err(DataError::EmptyFile)));
    assert!(matches!(
        parse_corpus("timestamp,label,f1\n"),
        Err(DataError::EmptyFile)
    ));
    assert!(matches!(
        parse_corpus("timestamp,label,f1\n\n\n"),
        Err(DataError::EmptyFile)
    ));
}

#[test]
fn corpus_skips_blank_lines_and_trims_fields() {
    let data = parse_corpus("timestamp,label,f1,f2\n\n 0 , 1 , 1.5 , 2.5 \n\n1,0,3.5,4.5\n\n").unwrap();
    assert_eq!(data.len(), 2);
    assert_eq!(data.features()[(0, 1)], 2.5);
    assert_eq!(data.labels()[1], 0.0);
}

#[test]
fn model_round_trip_and_header_check() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("w.txt");
    let w = Weights::new(DVector::from_vec(vec![0.1, -2.5e-17, 3e200])).unwrap();
    save_model(&path, &w).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.len(), 3);
    for i in 0..3 {
        assert_eq!(back.as_vector()[i].to_bits(), w.as_vector()[i].to_bits());
    }

    std::fs::write(&path, "some-other-format 2\n1.0\n").unwrap();
    assert!(matches!(load_model(&path), Err(DataError::Parse { line: 1, .. })));
    std::fs::write(&path, "bilogit-weights 1\n1.0\nbogus\n").unwrap();
    assert!(matches!(load_model(&path), Err(DataError::Parse { line: 3, .. })));
    std::fs::write(&path, "bilogit-weights 1\n").unwrap();
    assert!(matches!(load_model(&path), Err(DataError::EmptyFile)));
}

fn sample_table() -> ResultsTable {
    let row = |m: usize, delta: f64, start: usize, bucket: usize, p4: Option<f64>| ResultsRow {
        variant: Variant::Constrained,
        m,
        delta,
        start,
        bucket,
        p4,
        residual: 0.001,
        iterations: 12,
        termination: Termination::Converged,
        wall_time: 0.5,
    };
    ResultsTable {
        rows: vec![
            row(2, 0.99, 0, 1, Some(0.75)),
            row(2, 0.99, 0, 2, None),
        ],
        summaries: vec![CellSummary {
            m: 2,
            delta: 0.99,
            median: Some(0.75),
            p05: Some(0.7),
            p95: Some(0.8),
            defined_starts: 3,
        }],
        classic_bucket_p4: vec![Some(1.0), None],
        winner: WinnerKey {
            m: 2,
            delta: 0.99,
            start: 0,
            mean_p4: 0.75,
        },
        warnings: vec![],
    }
}

#[test]
fn results_file_layout() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("results.csv");
    save_results(&path, &sample_table(), "seed=9\nstarts=3").unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# seed=9");
    assert_eq!(lines[1], "# starts=3");
    assert_eq!(
        lines[2],
        "variant,m,delta,start,bucket,p4,residual,iterations,termination,wall_time"
    );
    assert_eq!(lines[3], "classic,0,0,0,1,1,NaN,0,-,NaN");
    assert_eq!(lines[4], "classic,0,0,0,2,undefined,NaN,0,-,NaN");
    assert_eq!(lines[5], "constrained,2,0.99,0,1,0.75,0.001,12,converged,0.5");
    assert_eq!(lines[6], "constrained,2,0.99,0,2,undefined,0.001,12,converged,0.5");
    assert_eq!(lines.len(), 7);
}

#[test]
fn summary_file_layout() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("summary.csv");
    save_summary(&path, &sample_table(), "seed=9").unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# seed=9");
    assert_eq!(lines[1], "# winner m=2 delta=0.99 start=0 mean_p4=0.75");
    assert_eq!(lines[2], "m,delta,defined_starts,median,p05,p95");
    assert_eq!(lines[3], "2,0.99,3,0.75,0.7,0.8");
    assert_eq!(lines.len(), 4);
}

#[test]
fn config_pairs_apply_or_explain() {
    let mut cfg = ExperimentConfig::default();
    apply_config_pair(&mut cfg, "rho", "none").unwrap();
    assert_eq!(cfg.rho, None);
    apply_config_pair(&mut cfg, "rho", "33.5").unwrap();
    assert_eq!(cfg.rho, Some(33.5));
    apply_config_pair(&mut cfg, "grid_m", "1, 2, 5").unwrap();
    assert_eq!(cfg.grid_m, vec![1, 2, 5]);
    apply_config_pair(&mut cfg, "variant", "unconstrained").unwrap();
    assert_eq!(cfg.variant, Variant::Unconstrained);
    apply_config_pair(&mut cfg, "normalize", "false").unwrap();
    assert!(!cfg.normalize);
    apply_config_pair(&mut cfg, "lm_max_iter", "77").unwrap();
    assert_eq!(cfg.lm.max_iter, 77);

    let err = apply_config_pair(&mut cfg, "mystery", "1").unwrap_err();
    assert!(err.contains("unknown config key"));
    let err = apply_config_pair(&mut cfg, "starts", "many").unwrap_err();
    assert!(err.contains("starts"));
    let err = apply_config_pair(&mut cfg, "variant", "hybrid").unwrap_err();
    assert!(err.contains("hybrid"));
}

#[test]
fn synthetic_drift_is_deterministic() {
    let a = generate_synthetic_drift(13, 30, 30, 4, 0.8);
    let b = generate_synthetic_drift(13, 30, 30, 4, 0.8);
    assert_eq!(a.labels(), b.labels());
    assert_eq!(a.timestamps().unwrap(), b.timestamps().unwrap());
    for i in 0..a.len() {
        for j in 0..a.dim() {
            assert_eq!(a.features()[(i, j)].to_bits(), b.features()[(i, j)].to_bits());
        }
    }
}

#[test]
fn synthetic_drift_shapes_and_labels() {
    let data = generate_synthetic_drift(21, 120, 80, 6, 1.0);
    assert_eq!(data.len(), 200);
    assert_eq!(data.dim(), 6);
    let ts: Vec<i64> = data.timestamps().unwrap().to_vec();
    assert_eq!(ts, (0..200).collect::<Vec<i64>>());
    let ones = data.labels().iter().filter(|&&y| y == 1.0).count();
    let zeros = data.labels().iter().filter(|&&y| y == 0.0).count();
    assert_eq!(ones + zeros, 200);
    assert!(ones > 50 && zeros > 50, "fair flips: {ones} vs {zeros}");
}

#[test]
fn drift_rotates_only_late_malicious_rows() {
    // same seed, same draws: drift changes nothing about benign rows or the
    // first malicious row (horizon fraction zero), and moves late malicious
    // rows without changing their norms
    let still = generate_synthetic_drift(31, 50, 50, 3, 0.0);
    let moved = generate_synthetic_drift(31, 50, 50, 3, 1.0);
    assert_eq!(still.labels(), moved.labels());

    let mut saw_late_move = false;
    for i in 0..still.len() {
        let a: Vec<f64> = still.features().row(i).iter().copied().collect();
        let b: Vec<f64> = moved.features().row(i).iter().copied().collect();
        if still.labels()[i] == 0.0 || i == 0 {
            assert_eq!(a, b, "row {i} should be drift-independent");
        } else {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_relative_eq!(na, nb, max_relative = 1e-12);
            if a != b {
                saw_late_move = true;
            }
        }
    }
    assert!(saw_late_move);
}

#[test]
fn drift_pulls_malicious_rows_toward_the_benign_cluster() {
    let data = generate_synthetic_drift(41, 200, 200, 5, 1.0);
    let q = data.dim();
    let mut benign_mean = DVector::zeros(q);
    let mut benign_count = 0.0;
    for i in 0..data.len() {
        if data.labels()[i] == 0.0 {
            benign_mean += data.features().row(i).transpose();
            benign_count += 1.0;
        }
    }
    benign_mean /= benign_count;

    let half = data.len() / 2;
    let mean_cos = |range: std::ops::Range<usize>| {
        let mut total = 0.0;
        let mut count = 0.0;
        for i in range {
            if data.labels()[i] == 1.0 {
                let row: DVector<f64> = data.features().row(i).transpose();
                total += common::cosine_ref(&row, &benign_mean);
                count += 1.0;
            }
        }
        total / count
    };
    let early = mean_cos(0..half);
    let late = mean_cos(half..data.len());
    assert!(
        late > early + 0.5,
        "full drift should sweep malicious rows toward benign: early {early:.3}, late {late:.3}"
    );
    assert!(early < -0.5, "early malicious rows start antipodal: {early:.3}");
}

#[test]
fn one_feature_corpus_never_drifts() {
    let a = generate_synthetic_drift(51, 40, 40, 1, 0.0);
    let b = generate_synthetic_drift(51, 40, 40, 1, 1.0);
    for i in 0..a.len() {
        assert_eq!(a.features()[(i, 0)].to_bits(), b.features()[(i, 0)].to_bits());
    }
}

#[test]
#[should_panic(expected = "sizes must be at least 1")]
fn drift_generator_rejects_empty_train() {
    let _ = generate_synthetic_drift(1, 0, 10, 2, 0.5);
}

#[test]
#[should_panic(expected = "drift_strength")]
fn drift_generator_rejects_negative_drift() {
    let _ = generate_synthetic_drift(1, 10, 10, 2, -0.25);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_round_trip_any_finite_features(
        rows in proptest::collection::vec(
            (any::<i64>(), any::<bool>(), proptest::collection::vec(
                prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
                3,
            )),
            1..12,
        )
    ) {
        let n = rows.len();
        let feats = DMatrix::from_fn(n, 3, |r, c| rows[r].2[c]);
        let labels = DVector::from_fn(n, |r, _| f64::from(u8::from(rows[r].1)));
        let ts: Vec<i64> = rows.iter().map(|r| r.0).collect();
        let data = Dataset::new(feats, labels, Some(ts)).unwrap();

        let dir = tempdir().unwrap();
        let path = dir.path().join("prop.csv");
        save_corpus(&path, &data).unwrap();
        let back = load_corpus(&path).unwrap();
        prop_assert_eq!(back.len(), n);
        prop_assert_eq!(back.timestamps().unwrap(), data.timestamps().unwrap());
        for i in 0..n {
            prop_assert_eq!(back.labels()[i], data.labels()[i]);
            for j in 0..3 {
                prop_assert_eq!(
                    back.features()[(i, j)].to_bits(),
                    data.features()[(i, j)].to_bits()
                );
            }
        }
    }

    #[test]
    fn model_round_trip_any_finite_weights(
        values in proptest::collection::vec(
            prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
            1..20,
        )
    ) {
        let w = Weights::new(DVector::from_vec(values.clone())).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.txt");
        save_model(&path, &w).unwrap();
        let back = load_model(&path).unwrap();
        prop_assert_eq!(back.len(), values.len());
        for (a, b) in back.as_vector().iter().zip(w.as_vector().iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
