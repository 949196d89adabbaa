//! The command-line surface end to end: exit codes, file outputs, config
//! precedence, and determinism of repeated runs.

use std::path::Path;
use std::process::{Command, Output};

fn bilogit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bilogit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Synthesizes a small corpus in `dir` and returns its file name.
fn make_corpus(dir: &Path) -> String {
    let out = bilogit(
        dir,
        &[
            "synth", "--seed", "3", "--n-train", "60", "--n-test", "40", "--q", "3", "--drift",
            "0.8", "--out", "c.csv",
        ],
    );
    assert_eq!(code(&out), 0, "synth failed: {}", stderr(&out));
    assert!(dir.join("c.csv").exists());
    "c.csv".to_string()
}

#[test]
fn version_and_help_exit_clean() {
    let dir = tempfile::tempdir().unwrap();
    let out = bilogit(dir.path(), &["--version"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("bilogit"));

    let out = bilogit(dir.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    let help = stdout(&out);
    for sub in ["train", "evaluate", "gridsearch", "check-derivatives", "props", "synth"] {
        assert!(help.contains(sub), "help is missing {sub}");
    }
}

#[test]
fn parse_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&bilogit(dir.path(), &["--frobnicate"])), 1);
    assert_eq!(code(&bilogit(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&bilogit(dir.path(), &[])), 1);
    // valid flag shape, bad value
    assert_eq!(
        code(&bilogit(dir.path(), &["synth", "--q", "0", "--out", "x.csv"])),
        1
    );
    assert_eq!(
        code(&bilogit(dir.path(), &["synth", "--drift", "-1", "--out", "x.csv"])),
        1
    );
}

#[test]
fn missing_and_malformed_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = bilogit(dir.path(), &["train", "--data", "absent.csv"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("absent.csv"));

    std::fs::write(dir.path().join("garbage.csv"), "not,a,corpus\n1,2,3\n").unwrap();
    let out = bilogit(dir.path(), &["train", "--data", "garbage.csv"]);
    assert_eq!(code(&out), 1);

    let corpus = make_corpus(dir.path());
    let out = bilogit(
        dir.path(),
        &["train", "--data", &corpus, "--set", "seed"],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("KEY=VALUE"));

    let out = bilogit(
        dir.path(),
        &["train", "--data", &corpus, "--set", "wibble=1"],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("unknown config key"));

    let out = bilogit(
        dir.path(),
        &["train", "--data", &corpus, "--delta", "1.0"],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn train_writes_model_and_results() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = make_corpus(dir.path());
    let out = bilogit(
        dir.path(),
        &[
            "train", "--data", &corpus, "--train-size", "60", "--test-partitions", "4", "--m",
            "2", "--delta", "0.9", "--seed", "5",
        ],
    );
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("resolved configuration:"));
    assert!(text.contains("classic bucket 1: P4"));
    assert!(text.contains("solver:"));
    assert!(dir.path().join("model.txt").exists());
    assert!(dir.path().join("results.csv").exists());

    let results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(results.contains("variant,m,delta,start,bucket,p4"));
    assert!(results.contains("classic,0,0,0,1,"));
    assert!(results.lines().any(|l| l.starts_with("constrained,2,0.9,0,1,")));

    let model = std::fs::read_to_string(dir.path().join("model.txt")).unwrap();
    assert!(model.starts_with("bilogit-weights 1\n"));
    assert_eq!(model.lines().count(), 4, "header plus one line per feature");
}

#[test]
fn evaluate_round_trips_a_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = make_corpus(dir.path());
    let out = bilogit(
        dir.path(),
        &["train", "--data", &corpus, "--train-size", "60", "--m", "2"],
    );
    assert_eq!(code(&out), 0);

    let out = bilogit(
        dir.path(),
        &[
            "evaluate", "--model", "model.txt", "--data", &corpus, "--buckets", "3", "--out",
            "series.csv",
        ],
    );
    assert_eq!(code(&out), 0, "evaluate failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("rows=100"));
    assert!(text.contains("p4="));

    let series = std::fs::read_to_string(dir.path().join("series.csv")).unwrap();
    assert!(series.contains("bucket,p4\n"));
    let data_rows: Vec<&str> = series
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty() && !l.starts_with("bucket"))
        .collect();
    assert_eq!(data_rows.len(), 3);
    assert!(data_rows[0].starts_with("1,"));

    // dimension mismatch between model and corpus
    let out = bilogit(
        dir.path(),
        &["synth", "--q", "5", "--out", "wide.csv", "--n-train", "10", "--n-test", "10"],
    );
    assert_eq!(code(&out), 0);
    let out = bilogit(
        dir.path(),
        &["evaluate", "--model", "model.txt", "--data", "wide.csv"],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("features"));
}

#[test]
fn solver_failure_exits_two_but_still_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = make_corpus(dir.path());
    let out = bilogit(
        dir.path(),
        &[
            "train", "--data", &corpus, "--train-size", "60", "--m", "2",
            "--set", "lm_epsilon=1e-15", "--set", "lm_max_iter=2",
        ],
    );
    assert_eq!(code(&out), 2, "wanted solver failure: {}", stderr(&out));
    assert!(stderr(&out).contains("max-iterations"));
    // outputs were written before the failure was reported
    assert!(dir.path().join("model.txt").exists());
    assert!(dir.path().join("results.csv").exists());
}

#[test]
fn stagnation_is_not_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = make_corpus(dir.path());
    let out = bilogit(
        dir.path(),
        &[
            "train", "--data", &corpus, "--train-size", "60", "--m", "2",
            "--set", "lm_epsilon=1e-14", "--set", "lm_stagnation_k=5",
        ],
    );
    assert_eq!(code(&out), 0, "stagnated run must exit clean: {}", stderr(&out));
    assert!(stdout(&out).contains("solver: stagnated"));
}

#[test]
fn config_file_then_set_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = make_corpus(dir.path());
    std::fs::write(dir.path().join("exp.cfg"), "seed=1\ntrain_size=50\n").unwrap();

    // --set overrides the file; the typed flag overrides --set
    let out = bilogit(
        dir.path(),
        &[
            "train", "--data", &corpus, "--config", "exp.cfg", "--set", "seed=2",
            "--seed", "3", "--m", "2",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(results.contains("# seed=3"));
    assert!(results.contains("# train_size=50"));

    let out = bilogit(
        dir.path(),
        &["train", "--data", &corpus, "--config", "exp.cfg", "--set", "seed=2", "--m", "2"],
    );
    assert_eq!(code(&out), 0);
    let results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(results.contains("# seed=2"));

    let out = bilogit(
        dir.path(),
        &["train", "--data", &corpus, "--config", "missing.cfg"],
    );
    assert_eq!(code(&out), 1);
}

/// Results rows minus the wall-time column, which is the only
/// nondeterministic field.
fn strip_wall_time(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| {
            if l.starts_with('#') || l.starts_with("variant,") {
                l.to_string()
            } else {
                l.rsplit_once(',').map_or_else(|| l.to_string(), |(head, _)| head.to_string())
            }
        })
        .collect()
}

#[test]
fn gridsearch_outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = make_corpus(dir.path());
    let args = [
        "gridsearch", "--data", "c.csv", "--train-size", "60", "--m", "1,2", "--delta",
        "0.9,0.99", "--starts", "2", "--seed", "17",
    ];
    let _ = corpus;

    let out = bilogit(dir.path(), &args);
    assert_eq!(code(&out), 0, "gridsearch failed: {}", stderr(&out));
    let first_results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let first_summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let first_stdout = stdout(&out);
    assert!(first_stdout.contains("winner: m="));

    // 2 m * 2 delta * 2 starts * 4 buckets grid rows + 4 classic rows
    let data_rows = first_results
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("variant,") && !l.is_empty())
        .count();
    assert_eq!(data_rows, 2 * 2 * 2 * 4 + 4);
    // one summary row per (m, delta) cell
    let summary_rows = first_summary
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("m,") && !l.is_empty())
        .count();
    assert_eq!(summary_rows, 4);
    assert!(first_summary.contains("# winner m="));

    let out = bilogit(dir.path(), &args);
    assert_eq!(code(&out), 0);
    let second_results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let second_summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();

    assert_eq!(strip_wall_time(&first_results), strip_wall_time(&second_results));
    assert_eq!(first_summary, second_summary);
    assert_eq!(
        first_stdout.lines().find(|l| l.starts_with("winner:")),
        stdout(&out).lines().find(|l| l.starts_with("winner:"))
    );
}

#[test]
fn derivative_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bilogit(dir.path(), &["check-derivatives", "--trials", "20", "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("all blocks within tolerance"));
    assert!(text.contains("max rel err"));
}

#[test]
fn props_hold_by_default_and_fail_loudly_on_a_bad_witness() {
    let dir = tempfile::tempdir().unwrap();
    let out = bilogit(dir.path(), &["props"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("both witnesses hold"));
    assert!(text.contains("g(midpoint)"));

    // the midpoint argument needs a negative threshold and at least two axes
    let out = bilogit(dir.path(), &["props", "--delta", "0.5"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("convex"));

    let out = bilogit(dir.path(), &["props", "--x0", "4"]);
    assert_eq!(code(&out), 3);

    let out = bilogit(dir.path(), &["props", "--x0", "1,bogus"]);
    assert_eq!(code(&out), 1);
}
