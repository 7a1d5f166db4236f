//! Command-line front end: an ask-tell optimization loop backed by a JSON
//! study file, identification of the best trial, and the two benchmark
//! harnesses.
//!
//! Exit codes: 0 on success, 1 on user error (bad arguments or input files),
//! 2 on internal error.

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use nei::acq::AcqMethod;
use nei::bench::{
    emit_opt_csv, emit_qmc_csv, mean_sem, run_opt_benchmark, run_qmc_study, OptBenchConfig,
    QmcStudyConfig,
};
use nei::problems::{Problem, PROBLEM_NAMES};
use nei::study::{create_study, load_study, Observation, StudyConfig, StudyState};
use nei::SearchSpace;

#[derive(Parser)]
#[command(name = "nei", about = "Constrained Bayesian optimization for noisy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a new study file from a search-space specification.
    Init(InitArgs),
    /// Propose the next batch of configurations to evaluate.
    Suggest(SuggestArgs),
    /// Record completed observations from a CSV file.
    Tell(TellArgs),
    /// Identify the best trial under one of the identification rules.
    Best(BestArgs),
    /// Run the quasirandom-vs-random integration study.
    BenchQmc(BenchQmcArgs),
    /// Run the closed-loop optimization benchmark.
    BenchOpt(BenchOptArgs),
}

#[derive(Args)]
struct InitArgs {
    /// JSON file describing the search space (a list of dimensions).
    space: PathBuf,
    /// Path of the study file to create.
    out: PathBuf,
    /// Number of black-box constraints.
    #[arg(long, default_value_t = 0)]
    constraints: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite an existing study file.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SuggestArgs {
    /// Study file to read and update.
    study: PathBuf,
    /// Number of configurations to propose.
    #[arg(short, long, default_value_t = 1)]
    q: usize,
}

#[derive(Args)]
struct TellArgs {
    /// Study file to read and update.
    study: PathBuf,
    /// CSV of observations: header row, then per row the coordinates,
    /// objective mean, objective sd, and per-constraint mean and sd.
    observations: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BestRule {
    /// Largest expected reduction of the objective below a baseline.
    ExpectedReduction,
    /// Smallest posterior mean among confidently feasible trials.
    ConfidentFeasible,
}

#[derive(Args)]
struct BestArgs {
    study: PathBuf,
    #[arg(long, value_enum, default_value_t = BestRule::ExpectedReduction)]
    rule: BestRule,
    /// Baseline objective value for the expected-reduction rule.
    #[arg(long)]
    b: Option<f64>,
    /// Per-constraint risk level for the confident-feasible rule.
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args)]
struct BenchQmcArgs {
    /// Output CSV path.
    out: PathBuf,
    #[arg(long, default_value = "gramacy")]
    problem: String,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchOptArgs {
    /// Output CSV path.
    out: PathBuf,
    /// Problem name, or "all".
    #[arg(long, default_value = "gramacy")]
    problem: String,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    #[arg(long, default_value_t = 9)]
    batches: usize,
    #[arg(long, default_value_t = 5)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum CliError {
    /// Bad input from the user: exit 1.
    User(String),
    /// Unexpected failure inside the toolkit: exit 2.
    Internal(String),
}

impl CliError {
    fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init(a) => cmd_init(&a),
        Command::Suggest(a) => cmd_suggest(&a),
        Command::Tell(a) => cmd_tell(&a),
        Command::Best(a) => cmd_best(&a),
        Command::BenchQmc(a) => cmd_bench_qmc(&a),
        Command::BenchOpt(a) => cmd_bench_opt(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn cmd_init(args: &InitArgs) -> Result<(), CliError> {
    if args.out.exists() && !args.force {
        return Err(CliError::user(format!(
            "{} already exists; pass --force to overwrite",
            args.out.display()
        )));
    }
    let body = std::fs::read_to_string(&args.space)
        .map_err(|e| CliError::user(format!("cannot read {}: {e}", args.space.display())))?;
    let space: SearchSpace = serde_json::from_str(&body)
        .map_err(|e| CliError::user(format!("invalid space spec {}: {e}", args.space.display())))?;
    // Deserialization bypasses the constructor; revalidate the bounds.
    let space = SearchSpace::new(space.dims)
        .map_err(|e| CliError::user(format!("invalid space spec {}: {e}", args.space.display())))?;
    let config = StudyConfig { seed: args.seed, ..StudyConfig::default() };
    let study = create_study(space, args.constraints, config)
        .map_err(|e| CliError::user(e.to_string()))?;
    save_study(&study, &args.out)?;
    println!(
        "created study {} ({} dimensions, {} constraints)",
        args.out.display(),
        study.space.dim(),
        study.num_constraints
    );
    Ok(())
}

fn cmd_suggest(args: &SuggestArgs) -> Result<(), CliError> {
    if args.q == 0 {
        return Err(CliError::user("q must be >= 1"));
    }
    let study = open_study(&args.study)?;
    let (updated, points) = study
        .suggest(args.q)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    save_study(&updated, &args.study)?;
    for x in &points {
        println!("{}", format_point(x));
    }
    Ok(())
}

fn cmd_tell(args: &TellArgs) -> Result<(), CliError> {
    let study = open_study(&args.study)?;
    let body = std::fs::read_to_string(&args.observations).map_err(|e| {
        CliError::user(format!("cannot read {}: {e}", args.observations.display()))
    })?;
    let observations = parse_observations(&body, study.space.dim(), study.num_constraints)?;
    if observations.is_empty() {
        eprintln!("warning: {} contains no observations", args.observations.display());
        return Ok(());
    }
    let count = observations.len();
    let updated = study
        .tell(&observations)
        .map_err(|e| CliError::user(e.to_string()))?;
    save_study(&updated, &args.study)?;
    println!("recorded {count} observation(s)");
    Ok(())
}

/// Parses the observation CSV. The first line is a header and is skipped;
/// each data row holds the coordinates, the objective mean and sd, then a
/// mean and sd per constraint.
fn parse_observations(
    body: &str,
    dim: usize,
    num_constraints: usize,
) -> Result<Vec<Observation>, CliError> {
    let expected = dim + 2 + 2 * num_constraints;
    let mut out = Vec::new();
    for (line_no, line) in body.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let fields = fields.map_err(|e| {
            CliError::user(format!("row {}: {e} in {line:?}", line_no + 1))
        })?;
        if fields.len() != expected {
            return Err(CliError::user(format!(
                "row {}: expected {expected} fields, found {}",
                line_no + 1,
                fields.len()
            )));
        }
        let x = DVector::from_vec(fields[..dim].to_vec());
        let objective = (fields[dim], fields[dim + 1]);
        let constraints = (0..num_constraints)
            .map(|j| (fields[dim + 2 + 2 * j], fields[dim + 3 + 2 * j]))
            .collect();
        out.push(Observation { x, objective, constraints, tag: String::new() });
    }
    Ok(out)
}

fn cmd_best(args: &BestArgs) -> Result<(), CliError> {
    let study = open_study(&args.study)?;
    let completed = study.completed();
    let moments = study
        .trial_moments()
        .map_err(|e| match e {
            nei::study::StudyError::InsufficientData => CliError::user(e.to_string()),
            other => CliError::Internal(other.to_string()),
        })?;
    let picked = match args.rule {
        BestRule::ExpectedReduction => {
            let b = args.b.unwrap_or_else(|| {
                moments.iter().map(|m| m.mu_f).fold(f64::NEG_INFINITY, f64::max)
            });
            let (idx, score) = nei::study::pick_best_expected_reduction(&moments, b);
            Some((idx, score))
        }
        BestRule::ConfidentFeasible => {
            let delta = args.delta.unwrap_or(study.config.delta);
            if !(delta > 0.0 && delta < 1.0) {
                return Err(CliError::user(format!("delta must lie in (0, 1), got {delta}")));
            }
            nei::study::pick_best_confident_feasible(&moments, delta)
        }
    };
    match picked {
        Some((idx, score)) => {
            let m = &moments[idx];
            println!("x: {}", format_point(&completed[idx].point()));
            println!("posterior mean: {}", m.mu_f);
            println!("feasibility product: {}", m.feasibility_product());
            println!("score: {score}");
        }
        None => println!("none qualifies"),
    }
    Ok(())
}

fn cmd_bench_qmc(args: &BenchQmcArgs) -> Result<(), CliError> {
    let problem = lookup_problem(&args.problem)?;
    if args.replicates == 0 {
        return Err(CliError::user("replicates must be >= 1"));
    }
    let cfg = QmcStudyConfig {
        replicates: args.replicates,
        seed: args.seed,
        ..QmcStudyConfig::default()
    };
    let rows = run_qmc_study(&problem, &cfg).map_err(|e| CliError::Internal(e.to_string()))?;
    emit_qmc_csv(&rows, &args.out).map_err(|e| CliError::Internal(e.to_string()))?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    for method in ["mc", "qmc"] {
        for &n in &cfg.sample_sizes {
            let errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.samples == n)
                .map(|r| r.relative_error)
                .collect();
            let dists: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.samples == n)
                .map(|r| r.optimizer_distance)
                .collect();
            let (em, es) = mean_sem(&errs);
            let (dm, _) = mean_sem(&dists);
            println!(
                "{method:>4} n={n:<4} relative error {em:.4} +/- {es:.4}  optimizer distance {dm:.4}"
            );
        }
    }
    Ok(())
}

fn cmd_bench_opt(args: &BenchOptArgs) -> Result<(), CliError> {
    let problems = if args.problem == "all" {
        Problem::all()
    } else {
        vec![lookup_problem(&args.problem)?]
    };
    if args.replicates == 0 {
        return Err(CliError::user("replicates must be >= 1"));
    }
    if args.batch_size == 0 {
        return Err(CliError::user("batch size must be >= 1"));
    }
    let cfg = OptBenchConfig {
        batches: args.batches,
        batch_size: args.batch_size,
        replicates: args.replicates,
        seed: args.seed,
        ..OptBenchConfig::default()
    };
    let methods = [AcqMethod::Nei, AcqMethod::HeuristicEi];
    let rows = run_opt_benchmark(&problems, &methods, &cfg)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    emit_opt_csv(&rows, &args.out).map_err(|e| CliError::Internal(e.to_string()))?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    for problem in &problems {
        for method in ["nei", "ei-heuristic"] {
            let finals: Vec<f64> = rows
                .iter()
                .filter(|r| {
                    r.problem == problem.name && r.method == method && r.iteration == cfg.batches
                })
                .filter_map(|r| r.best_feasible_true)
                .collect();
            let (m, s) = mean_sem(&finals);
            println!(
                "{:>10} {method:<12} final best feasible {m:.4} +/- {s:.4} ({} of {} replicates feasible)",
                problem.name,
                finals.len(),
                cfg.replicates
            );
        }
    }
    Ok(())
}

fn lookup_problem(name: &str) -> Result<Problem, CliError> {
    Problem::by_name(name).map_err(|_| {
        CliError::user(format!(
            "unknown problem {name:?}; available: {}",
            PROBLEM_NAMES.join(", ")
        ))
    })
}

fn open_study(path: &Path) -> Result<StudyState, CliError> {
    load_study(path).map_err(|e| CliError::user(format!("cannot load {}: {e}", path.display())))
}

fn save_study(study: &StudyState, path: &Path) -> Result<(), CliError> {
    study
        .save(path)
        .map_err(|e| CliError::Internal(format!("cannot save {}: {e}", path.display())))
}

fn format_point(x: &DVector<f64>) -> String {
    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}
