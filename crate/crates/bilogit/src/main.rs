//! Command-line front end: train and evaluate classifiers, run the (m, delta)
//! grid, generate synthetic drifting corpora, and run the self-checks.
//!
//! Exit codes: 0 success; 1 validation or parse failure; 2 solver
//! non-convergence on a required run; 3 property-check failure.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bilogit::data::{
    apply_config_pair, generate_synthetic_drift, load_config, load_corpus, load_model,
    render_config, save_corpus, save_model, save_results, save_summary, DataError,
};
use bilogit::diagnostics::{distinct_optima_demo, nonconvexity_demo, run_derivative_check};
use bilogit::metrics::confusion;
use bilogit::pipeline::{
    chronological_split, derive_seed, evaluate_buckets, grid_search, select_adversary_seed,
    train_bilevel, train_classic, AdversaryBudget, ExperimentConfig, PipelineError, ResultsRow,
    ResultsTable, Variant, WarmStart, WarmStartKind, WinnerKey,
};
use bilogit::problem::{BilevelProblem, Dataset, HyperParams};
use bilogit::solver::Termination;

#[derive(Parser)]
#[command(
    name = "bilogit",
    version,
    about = "Adversarially robust logistic regression via pessimistic bilevel training"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one classifier on a corpus and write the model and results
    Train(TrainArgs),
    /// Score a saved model on a corpus
    Evaluate(EvalArgs),
    /// Train and evaluate every (m, delta) cell with multi-starts
    Gridsearch(GridArgs),
    /// Compare analytic derivatives against finite differences
    CheckDerivatives(CheckArgs),
    /// Demonstrate the lower level's structure: equal-loss optima and a
    /// nonconvex feasible set
    Props(PropsArgs),
    /// Generate a synthetic drifting corpus
    Synth(SynthArgs),
}

/// Config resolution shared by the experiment commands: defaults, then the
/// config file, then --set pairs, then typed flags.
#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set lm_epsilon=1e-8 (repeatable)
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_partitions: Option<usize>,
    #[arg(long)]
    starts: Option<usize>,
    /// constrained, unconstrained, or classic
    #[arg(long)]
    variant: Option<String>,
    /// classic or random
    #[arg(long)]
    warm_start: Option<String>,
    /// Ridge divisor, or "none" to disable the penalty
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg = load_config(path, &cfg)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        }
        let mut apply = |key: &str, value: String| -> Result<(), CliError> {
            apply_config_pair(&mut cfg, key, &value).map_err(CliError::Validation)
        };
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            apply(key.trim(), value.trim().to_string())?;
        }
        if let Some(v) = self.seed {
            apply("seed", v.to_string())?;
        }
        if let Some(v) = self.train_size {
            apply("train_size", v.to_string())?;
        }
        if let Some(v) = self.test_partitions {
            apply("test_partitions", v.to_string())?;
        }
        if let Some(v) = self.starts {
            apply("starts", v.to_string())?;
        }
        if let Some(v) = &self.variant {
            apply("variant", v.clone())?;
        }
        if let Some(v) = &self.warm_start {
            apply("warm_start", v.clone())?;
        }
        if let Some(v) = &self.rho {
            apply("rho", v.clone())?;
        }
        if let Some(v) = self.threshold {
            apply("threshold", v.to_string())?;
        }
        cfg.validate().map_err(CliError::from)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus file (timestamp, label, features)
    #[arg(long)]
    data: PathBuf,
    /// Similarity threshold for this run
    #[arg(long, default_value_t = 0.99)]
    delta: f64,
    /// Adversary seed size for this run
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value = "model.txt")]
    out_model: PathBuf,
    #[arg(long, default_value = "results.csv")]
    out_results: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Chronological buckets for the per-bucket series (with --out)
    #[arg(long, default_value_t = 1)]
    buckets: usize,
    /// Write the per-bucket P4 series as columnar text
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated adversary sizes, e.g. 1,2,5,10
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    /// Comma-separated similarity thresholds, e.g. 0.9,0.99,0.999
    #[arg(long, value_delimiter = ',')]
    delta: Option<Vec<f64>>,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    #[arg(long, default_value = "summary.csv")]
    summary_out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct PropsArgs {
    /// Origin row for the nonconvexity witness, comma-separated
    #[arg(long, default_value = "-1,-1,-1")]
    x0: String,
    /// Similarity threshold for the nonconvexity witness
    #[arg(long, default_value_t = -0.8, allow_hyphen_values = true)]
    delta: f64,
    /// Random (w, X) pairs for the equal-loss demonstration
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    #[arg(long, default_value_t = 8)]
    q: usize,
    /// Fraction of the benign-malicious angle swept by the end of the horizon
    #[arg(long, default_value_t = 1.0)]
    drift: f64,
    #[arg(long, default_value = "corpus.csv")]
    out: PathBuf,
}

enum CliError {
    Validation(String),
    Solver(String),
    Property(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Solver(_) => 2,
            CliError::Property(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Solver(m) | CliError::Property(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::AllScoresUndefined => CliError::Solver(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Train(args) => run_train(args),
        Cmd::Evaluate(args) => run_evaluate(args),
        Cmd::Gridsearch(args) => run_gridsearch(args),
        Cmd::CheckDerivatives(args) => run_check(args),
        Cmd::Props(args) => run_props(args),
        Cmd::Synth(args) => run_synth(args),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.code());
    }
}

fn print_config(config_text: &str) {
    println!("resolved configuration:");
    for line in config_text.lines() {
        println!("  {line}");
    }
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

fn fmt_p4(p4: Option<f64>) -> String {
    p4.map_or_else(|| "undefined".into(), |v| format!("{v:.6}"))
}

fn solver_failed(t: Termination) -> bool {
    matches!(
        t,
        Termination::MaxIterations | Termination::LineSearchFailed | Termination::NumericalBreakdown
    )
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = args.cfg.resolve()?;
    if let Some(m) = args.m {
        cfg.adversary_budget = AdversaryBudget::Count(m);
        cfg.validate()?;
    }
    if !(args.delta > -1.0 && args.delta < 1.0) {
        return Err(CliError::Validation(format!(
            "delta {} outside (-1,1)",
            args.delta
        )));
    }

    let data = load_corpus(&args.data)
        .map_err(|e| CliError::Validation(format!("{}: {e}", args.data.display())))?;

    let mut config_text = render_config(&cfg);
    let _ = writeln!(config_text, "command=train");
    let _ = writeln!(config_text, "data={}", args.data.display());
    let _ = writeln!(config_text, "run_delta={}", args.delta);
    print_config(&config_text);

    let (train_set, buckets) = chronological_split(&data, &cfg)?;
    let mut classic_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let classic = train_classic(&train_set, cfg.rho, &mut classic_rng)?;
    let classic_p4 = evaluate_buckets(&classic.weights, &buckets, cfg.threshold);

    let (classifier, rows, winner) = if cfg.variant == Variant::ClassicOnly {
        let winner = WinnerKey {
            m: 0,
            delta: 0.0,
            start: 0,
            mean_p4: mean_defined(&classic_p4).unwrap_or(f64::NAN),
        };
        (classic.clone(), Vec::new(), winner)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, 0, 0, 0]));
        let (static_set, x0) = select_adversary_seed(&train_set, &cfg, &mut rng)?;
        let m = x0.len();
        let params = HyperParams::new(args.delta, cfg.rho, m)
            .map_err(PipelineError::Problem)?
            .with_normalization(cfg.normalize);
        let problem =
            BilevelProblem::new(static_set, x0, params).map_err(PipelineError::Problem)?;
        let warm = match cfg.warm_start {
            WarmStartKind::Classic => WarmStart::Weights(classic.weights.clone()),
            WarmStartKind::Random => WarmStart::Random,
        };
        let classifier = train_bilevel(&problem, cfg.variant, &warm, &cfg.lm, &mut rng)?;
        let bucket_p4 = evaluate_buckets(&classifier.weights, &buckets, cfg.threshold);
        let report = classifier
            .solve_report
            .as_ref()
            .expect("bilevel training carries a report");
        let residual = *report.residual_history.last().expect("history is nonempty");
        let rows: Vec<ResultsRow> = bucket_p4
            .iter()
            .enumerate()
            .map(|(b, &p4)| ResultsRow {
                variant: cfg.variant,
                m,
                delta: args.delta,
                start: 0,
                bucket: b + 1,
                p4,
                residual,
                iterations: report.iterations,
                termination: report.termination,
                wall_time: report.wall_time,
            })
            .collect();
        let winner = WinnerKey {
            m,
            delta: args.delta,
            start: 0,
            mean_p4: mean_defined(&bucket_p4).unwrap_or(f64::NAN),
        };
        (classifier, rows, winner)
    };

    save_model(&args.out_model, &classifier.weights)?;
    let table = ResultsTable {
        rows,
        summaries: Vec::new(),
        classic_bucket_p4: classic_p4.clone(),
        winner,
        warnings: Vec::new(),
    };
    save_results(&args.out_results, &table, &config_text)?;
    println!("model: {}", args.out_model.display());
    println!("results: {}", args.out_results.display());

    for (b, p4) in classic_p4.iter().enumerate() {
        println!("classic bucket {}: P4 {}", b + 1, fmt_p4(*p4));
    }
    if let Some(report) = &classifier.solve_report {
        for row in &table.rows {
            println!(
                "{} m={} delta={} bucket {}: P4 {}",
                row.variant.as_str(),
                row.m,
                row.delta,
                row.bucket,
                fmt_p4(row.p4)
            );
        }
        println!(
            "solver: {} after {} iterations, residual {:.3e}",
            report.termination.as_str(),
            report.iterations,
            report.residual_history.last().expect("nonempty")
        );
        if solver_failed(report.termination) {
            return Err(CliError::Solver(format!(
                "solver stopped with {} on the requested run",
                report.termination.as_str()
            )));
        }
    }
    Ok(())
}

fn run_evaluate(args: EvalArgs) -> Result<(), CliError> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(CliError::Validation(format!(
            "threshold {} outside (0,1)",
            args.threshold
        )));
    }
    if args.buckets == 0 {
        return Err(CliError::Validation("buckets must be at least 1".into()));
    }
    let weights = load_model(&args.model)
        .map_err(|e| CliError::Validation(format!("{}: {e}", args.model.display())))?;
    let data = load_corpus(&args.data)
        .map_err(|e| CliError::Validation(format!("{}: {e}", args.data.display())))?;
    if weights.len() != data.dim() {
        return Err(CliError::Validation(format!(
            "model has {} weights but corpus has {} features",
            weights.len(),
            data.dim()
        )));
    }

    let counts = confusion(&weights, &data, args.threshold);
    println!(
        "rows={} tp={} tn={} fp={} fn={}",
        counts.total(),
        counts.true_pos,
        counts.true_neg,
        counts.false_pos,
        counts.false_neg
    );
    println!("p4={}", fmt_p4(counts.p4()));

    if let Some(out) = &args.out {
        let buckets = cut_buckets(&data, args.buckets);
        let series = evaluate_buckets(&weights, &buckets, args.threshold);
        let mut text = format!(
            "# command=evaluate\n# model={}\n# data={}\n# threshold={}\n# buckets={}\nbucket,p4\n",
            args.model.display(),
            args.data.display(),
            args.threshold,
            args.buckets
        );
        for (b, p4) in series.iter().enumerate() {
            let _ = writeln!(
                text,
                "{},{}",
                b + 1,
                p4.map_or_else(|| "undefined".into(), |v| v.to_string())
            );
        }
        std::fs::write(out, text).map_err(DataError::from)?;
        println!("series: {}", out.display());
    }
    Ok(())
}

/// Chronological K-way cut of a whole corpus (file order when timestamps are
/// absent), sizes within one of each other.
fn cut_buckets(data: &Dataset, k: usize) -> Vec<Dataset> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some(ts) = data.timestamps() {
        order.sort_by_key(|&i| ts[i]);
    }
    let base = order.len() / k;
    let extra = order.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut at = 0;
    for b in 0..k {
        let size = base + usize::from(b < extra);
        out.push(data.select(&order[at..at + size]));
        at += size;
    }
    out
}

fn run_gridsearch(args: GridArgs) -> Result<(), CliError> {
    let mut cfg = args.cfg.resolve()?;
    if let Some(m) = args.m {
        cfg.grid_m = m;
    }
    if let Some(delta) = args.delta {
        cfg.grid_delta = delta;
    }
    cfg.validate()?;

    let data = load_corpus(&args.data)
        .map_err(|e| CliError::Validation(format!("{}: {e}", args.data.display())))?;

    let mut config_text = render_config(&cfg);
    let _ = writeln!(config_text, "command=gridsearch");
    let _ = writeln!(config_text, "data={}", args.data.display());
    print_config(&config_text);

    let outcome = grid_search(&data, &cfg)?;
    for w in &outcome.table.warnings {
        eprintln!("warning: {w}");
    }
    save_results(&args.out, &outcome.table, &config_text)?;
    save_summary(&args.summary_out, &outcome.table, &config_text)?;

    let w = &outcome.table.winner;
    println!("results: {}", args.out.display());
    println!("summary: {}", args.summary_out.display());
    println!(
        "winner: m={} delta={} start={} mean_p4={:.6}",
        w.m, w.delta, w.start, w.mean_p4
    );
    Ok(())
}

fn run_check(args: CheckArgs) -> Result<(), CliError> {
    if args.trials == 0 {
        return Err(CliError::Validation("trials must be at least 1".into()));
    }
    if !(args.tol > 0.0) {
        return Err(CliError::Validation(format!(
            "tolerance {} must be positive",
            args.tol
        )));
    }
    println!(
        "comparing analytic derivatives against central differences: {} trials, tolerance {}",
        args.trials, args.tol
    );
    let report = run_derivative_check(args.trials, args.tol, args.seed);
    for block in &report.blocks {
        println!(
            "  {:<22} {:>8} entries, max rel err {:.3e}",
            block.name, block.entries, block.max_rel_err
        );
    }
    if report.passed() {
        println!("all blocks within tolerance");
        Ok(())
    } else {
        Err(CliError::Property(
            "finite-difference check failed; see the per-block errors above".into(),
        ))
    }
}

fn fmt_vec(v: &DVector<f64>) -> String {
    let inner = v
        .iter()
        .map(|x| format!("{x:.6}"))
        .collect::<Vec<_>>()
        .join(", ");
    format!("({inner})")
}

fn run_props(args: PropsArgs) -> Result<(), CliError> {
    let x0: Vec<f64> = args
        .x0
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Validation(format!("bad x0 entry {s:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let x0 = DVector::from_vec(x0);

    println!("equal-loss optima: {} random (w, X) pairs", args.trials);
    let witnesses = distinct_optima_demo(args.trials, args.seed).map_err(CliError::Property)?;
    let mut all_hold = true;
    for (i, w) in witnesses.iter().enumerate() {
        println!(
            "  pair {}: q={} m={} delta={:.3} |f - f'| = {:.3e} feasible={}",
            i + 1,
            w.q,
            w.m,
            w.delta,
            w.gap(),
            w.both_feasible
        );
        all_hold &= w.holds();
    }

    println!("nonconvex feasible set: x0 = {}, delta = {}", fmt_vec(&x0), args.delta);
    let nc = nonconvexity_demo(&x0, args.delta).map_err(CliError::Property)?;
    println!("  a        = {}  g(a) = {:.6}", fmt_vec(&nc.a), nc.g_a);
    println!("  b        = {}  g(b) = {:.6}", fmt_vec(&nc.b), nc.g_b);
    println!(
        "  midpoint = {}  g(midpoint) = {:.6}",
        fmt_vec(&nc.midpoint),
        nc.g_mid
    );

    if all_hold && nc.holds() {
        println!("both witnesses hold");
        Ok(())
    } else {
        Err(CliError::Property("a witness failed its check".into()))
    }
}

fn run_synth(args: SynthArgs) -> Result<(), CliError> {
    if args.n_train == 0 || args.n_test == 0 || args.q == 0 {
        return Err(CliError::Validation(
            "n_train, n_test, and q must be at least 1".into(),
        ));
    }
    if !(args.drift.is_finite() && args.drift >= 0.0) {
        return Err(CliError::Validation(format!(
            "drift {} must be finite and nonnegative",
            args.drift
        )));
    }
    let data = generate_synthetic_drift(args.seed, args.n_train, args.n_test, args.q, args.drift);
    save_corpus(&args.out, &data)?;
    let malicious = data.labels().iter().filter(|&&y| y == 1.0).count();
    println!(
        "wrote {} rows ({} train + {} test), q={}, {} malicious, drift={} over the horizon",
        data.len(),
        args.n_train,
        args.n_test,
        args.q,
        malicious,
        args.drift
    );
    println!("corpus: {}", args.out.display());
    Ok(())
}
