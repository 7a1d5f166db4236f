//! Benchmark studies: quasirandom-vs-random integration accuracy, and the
//! closed-loop optimization comparison between the noisy acquisition and the
//! plug-in EI baseline, both emitted as CSV.
//!
//! Replicates are independent and run on a worker pool; every number is a
//! deterministic function of (seed, configuration).

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::acq::{
    generate_batch, nei, optimize_acquisition, prepare_fantasies, AcqError, AcqMethod,
    AcqStyle, BatchConfig, SampleMode,
};
use crate::gp::{fit_map, FitConfig, GpModel, NoisyDataset};
use crate::mix_seed;
use crate::problems::Problem;
use crate::qmc::SobolGenerator;
use crate::study::{pick_best_confident_feasible, pick_best_expected_reduction, TrialMoments};

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Acq(#[from] AcqError),
    #[error(transparent)]
    Gp(#[from] crate::gp::GpError),
    #[error(transparent)]
    Problem(#[from] crate::problems::ProblemError),
    #[error(transparent)]
    Study(#[from] crate::study::StudyError),
    #[error("failed to write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One measurement of the integration study.
#[derive(Debug, Clone, PartialEq)]
pub struct QmcStudyRow {
    /// "mc" or "qmc".
    pub method: &'static str,
    pub samples: usize,
    pub replicate: usize,
    /// |estimate − ground truth| / |ground truth| at the query point.
    pub relative_error: f64,
    /// Distance from the ground-truth acquisition optimizer, as a fraction
    /// of the search-space diagonal.
    pub optimizer_distance: f64,
}

#[derive(Debug, Clone)]
pub struct QmcStudyConfig {
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    /// MC sample count defining the ground truth.
    pub ground_truth_samples: usize,
    /// Restarts for the ground-truth optimizer.
    pub ground_truth_restarts: usize,
    /// Restarts for the per-method optimizer runs.
    pub restarts: usize,
    pub observed: usize,
    pub pending: usize,
}

impl Default for QmcStudyConfig {
    fn default() -> Self {
        Self {
            sample_sizes: vec![8, 16, 32, 50],
            replicates: 100,
            seed: 0,
            ground_truth_samples: 10_000,
            ground_truth_restarts: 100,
            restarts: 20,
            observed: 5,
            pending: 5,
        }
    }
}

/// The integration study: noisy observations at a few quasirandom points,
/// more quasirandom points pending, and the acquisition integral estimated
/// with random and quasirandom fantasies of several sizes. Accuracy is
/// scored against a large plain-MC ground truth at the ground-truth
/// maximizer, and optimizer quality as the distance to that maximizer.
pub fn run_qmc_study(
    problem: &Problem,
    cfg: &QmcStudyConfig,
) -> Result<Vec<QmcStudyRow>, BenchError> {
    if cfg.replicates == 0 {
        return Err(BenchError::InvalidArgument("replicates must be >= 1".into()));
    }
    let mut rows: Vec<QmcStudyRow> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| qmc_study_replicate(problem, cfg, rep))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    rows.sort_by(|a, b| {
        (a.method, a.samples, a.replicate).cmp(&(b.method, b.samples, b.replicate))
    });
    Ok(rows)
}

fn qmc_study_replicate(
    problem: &Problem,
    cfg: &QmcStudyConfig,
    rep: usize,
) -> Result<Vec<QmcStudyRow>, BenchError> {
    let rep_seed = mix_seed(cfg.seed, rep as u64);
    let space = &problem.space;
    let d = space.dim();

    let mut gen = SobolGenerator::new(d, mix_seed(rep_seed, 0x0B5))
        .map_err(AcqError::from)?;
    let observed: Vec<DVector<f64>> = (0..cfg.observed)
        .map(|_| space.denormalize(&DVector::from_vec(gen.next_point())))
        .collect();
    let pending: Vec<DVector<f64>> = (0..cfg.pending)
        .map(|_| space.denormalize(&DVector::from_vec(gen.next_point())))
        .collect();

    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(rep_seed, 0xE7A1));
    let evals: Vec<_> =
        observed.iter().map(|x| problem.evaluate_noisy(x, &mut rng)).collect::<Result<_, _>>()?;
    let fit_cfg = FitConfig { seed: rep_seed, ..FitConfig::default() };
    let objective = fit_map(
        &NoisyDataset::new(
            observed.clone(),
            evals.iter().map(|e| e.objective.0).collect(),
            evals.iter().map(|e| e.objective.1).collect(),
        )?,
        space,
        &fit_cfg,
    )?;
    let constraints: Vec<GpModel> = (0..problem.num_constraints)
        .map(|j| {
            fit_map(
                &NoisyDataset::new(
                    observed.clone(),
                    evals.iter().map(|e| e.constraints[j].0).collect(),
                    evals.iter().map(|e| e.constraints[j].1).collect(),
                )?,
                space,
                &fit_cfg,
            )
            .map_err(BenchError::from)
        })
        .collect::<Result<_, _>>()?;

    let truth = prepare_fantasies(
        &objective,
        &constraints,
        &pending,
        cfg.ground_truth_samples,
        SampleMode::Mc,
        AcqStyle::Nei,
        space,
        mix_seed(rep_seed, 0x67),
    )?;
    let truth_opt = optimize_acquisition(&truth, cfg.ground_truth_restarts, mix_seed(rep_seed, 0x9))?;
    let truth_x = &truth_opt[0].x;
    // Integration error is scored where the integral drives decisions: at
    // the ground-truth maximizer. Relative error at an arbitrary fixed point
    // is ill-conditioned whenever the true NEI there is near zero.
    let query = truth_x.clone();
    let truth_value = truth_opt[0].value;

    let mut rows = Vec::new();
    for (method, mode) in [("mc", SampleMode::Mc), ("qmc", SampleMode::Qmc)] {
        for &n in &cfg.sample_sizes {
            let fs = prepare_fantasies(
                &objective,
                &constraints,
                &pending,
                n,
                mode,
                AcqStyle::Nei,
                space,
                mix_seed(rep_seed, 0x100 + n as u64),
            )?;
            let est = nei(&query, &fs)?;
            let relative_error = (est - truth_value).abs() / truth_value.abs().max(1e-300);
            let opt = optimize_acquisition(&fs, cfg.restarts, mix_seed(rep_seed, 0x200 + n as u64))?;
            let optimizer_distance = (&opt[0].x - truth_x).norm() / space.diagonal();
            rows.push(QmcStudyRow {
                method,
                samples: n,
                replicate: rep,
                relative_error,
                optimizer_distance,
            });
        }
    }
    Ok(rows)
}

/// One iteration record of the closed-loop comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct OptTraceRow {
    pub problem: String,
    /// "nei" or "ei-heuristic".
    pub method: &'static str,
    pub replicate: usize,
    /// 0 after initialization, then one per batch.
    pub iteration: usize,
    /// True objective of the best evaluated point that is truly feasible.
    pub best_feasible_true: Option<f64>,
    /// True objective of the expected-reduction identified trial.
    pub identified_value: f64,
    /// Whether that trial is truly feasible.
    pub identified_feasible: bool,
    /// True objective of the confident-feasible identified trial, if any.
    pub confident_value: Option<f64>,
    pub confident_feasible: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct OptBenchConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub replicates: usize,
    pub seed: u64,
    pub sample_count: usize,
    pub restarts: usize,
    pub delta: f64,
}

impl Default for OptBenchConfig {
    fn default() -> Self {
        Self {
            batches: 9,
            batch_size: 5,
            replicates: 20,
            seed: 0,
            sample_count: 32,
            restarts: 20,
            delta: 0.05,
        }
    }
}

/// The closed-loop benchmark: per replicate, both methods start from the
/// identical noisy initialization batch, then alternate suggest/evaluate
/// rounds. Scoring uses noiseless function values; the loop only ever sees
/// the noisy ones.
pub fn run_opt_benchmark(
    problems: &[Problem],
    methods: &[AcqMethod],
    cfg: &OptBenchConfig,
) -> Result<Vec<OptTraceRow>, BenchError> {
    if cfg.replicates == 0 || cfg.batch_size == 0 {
        return Err(BenchError::InvalidArgument(
            "replicates and batch_size must be >= 1".into(),
        ));
    }
    let jobs: Vec<(usize, usize)> = (0..problems.len())
        .flat_map(|p| (0..cfg.replicates).map(move |r| (p, r)))
        .collect();
    let mut rows: Vec<OptTraceRow> = jobs
        .into_par_iter()
        .map(|(p, rep)| opt_bench_replicate(&problems[p], methods, cfg, rep))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    rows.sort_by(|a, b| {
        (&a.problem, a.method, a.replicate, a.iteration)
            .cmp(&(&b.problem, b.method, b.replicate, b.iteration))
    });
    Ok(rows)
}

struct LoopState {
    points: Vec<DVector<f64>>,
    obj: Vec<(f64, f64)>,
    cons: Vec<Vec<(f64, f64)>>,
}

fn opt_bench_replicate(
    problem: &Problem,
    methods: &[AcqMethod],
    cfg: &OptBenchConfig,
    rep: usize,
) -> Result<Vec<OptTraceRow>, BenchError> {
    let rep_seed = mix_seed(cfg.seed, rep as u64);
    let space = &problem.space;

    // Shared initialization batch: same points, same noisy observations.
    let mut gen = SobolGenerator::new(space.dim(), mix_seed(rep_seed, 0x1717))
        .map_err(AcqError::from)?;
    let init_points: Vec<DVector<f64>> = (0..cfg.batch_size)
        .map(|_| space.round_integers(&space.denormalize(&DVector::from_vec(gen.next_point()))))
        .collect();
    let mut init_rng = ChaCha12Rng::seed_from_u64(mix_seed(rep_seed, 0xBEEF));
    let init_evals: Vec<_> = init_points
        .iter()
        .map(|x| problem.evaluate_noisy(x, &mut init_rng))
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    for (m_idx, &method) in methods.iter().enumerate() {
        let method_name = match method {
            AcqMethod::Nei => "nei",
            AcqMethod::HeuristicEi => "ei-heuristic",
        };
        let mut state = LoopState {
            points: init_points.clone(),
            obj: init_evals.iter().map(|e| e.objective).collect(),
            cons: init_evals.iter().map(|e| e.constraints.clone()).collect(),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(rep_seed, 0xC0 + m_idx as u64));
        // One fit per round serves both the identification trace and the
        // next batch; the data does not change in between.
        let mut models = fit_loop_models(problem, &state, rep_seed)?;
        rows.push(trace_row(problem, method_name, rep, 0, &state, &models, cfg.delta)?);
        for iteration in 1..=cfg.batches {
            let (objective, constraints) = &models;
            let batch_cfg = BatchConfig {
                q: cfg.batch_size,
                restarts: cfg.restarts,
                sample_count: cfg.sample_count,
                seed: mix_seed(rep_seed, 0x5000 + iteration as u64),
                method,
                sample_mode: SampleMode::Qmc,
            };
            let batch = generate_batch(objective, constraints, space, &[], &batch_cfg)?;
            for x in batch {
                let e = problem.evaluate_noisy(&x, &mut rng)?;
                state.points.push(x);
                state.obj.push(e.objective);
                state.cons.push(e.constraints);
            }
            models = fit_loop_models(problem, &state, rep_seed)?;
            rows.push(trace_row(problem, method_name, rep, iteration, &state, &models, cfg.delta)?);
        }
    }
    Ok(rows)
}

fn fit_loop_models(
    problem: &Problem,
    state: &LoopState,
    seed: u64,
) -> Result<(GpModel, Vec<GpModel>), BenchError> {
    let fit_cfg = FitConfig { seed, ..FitConfig::default() };
    let objective = fit_map(
        &NoisyDataset::new(
            state.points.clone(),
            state.obj.iter().map(|o| o.0).collect(),
            state.obj.iter().map(|o| o.1).collect(),
        )?,
        &problem.space,
        &fit_cfg,
    )?;
    let constraints = (0..problem.num_constraints)
        .map(|j| {
            fit_map(
                &NoisyDataset::new(
                    state.points.clone(),
                    state.cons.iter().map(|c| c[j].0).collect(),
                    state.cons.iter().map(|c| c[j].1).collect(),
                )?,
                &problem.space,
                &fit_cfg,
            )
            .map_err(BenchError::from)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((objective, constraints))
}

fn trace_row(
    problem: &Problem,
    method: &'static str,
    replicate: usize,
    iteration: usize,
    state: &LoopState,
    models: &(GpModel, Vec<GpModel>),
    delta: f64,
) -> Result<OptTraceRow, BenchError> {
    // True-value scoring of everything evaluated so far.
    let truths: Vec<(f64, Vec<f64>)> = state
        .points
        .iter()
        .map(|x| problem.evaluate_true(x))
        .collect::<Result<_, _>>()?;
    let best_feasible_true = truths
        .iter()
        .filter(|(_, c)| c.iter().all(|&v| v <= 0.0))
        .map(|(f, _)| *f)
        .fold(None, |acc: Option<f64>, f| Some(acc.map_or(f, |a| a.min(f))));

    // Identification from the model fitted to the noisy data.
    let (objective, constraints) = models;
    let moments: Vec<TrialMoments> = state
        .points
        .iter()
        .map(|x| {
            let (mu_f, _) = objective.predict(x);
            let cons = constraints
                .iter()
                .map(|c| {
                    let (mu, var) = c.predict(x);
                    (mu, var.max(0.0).sqrt().max(1e-12))
                })
                .collect();
            TrialMoments { mu_f, constraints: cons }
        })
        .collect();
    let baseline = moments.iter().map(|m| m.mu_f).fold(f64::NEG_INFINITY, f64::max);
    let (ident_idx, _) = pick_best_expected_reduction(&moments, baseline);
    let identified_value = truths[ident_idx].0;
    let identified_feasible = truths[ident_idx].1.iter().all(|&v| v <= 0.0);
    let confident = pick_best_confident_feasible(&moments, delta).map(|(i, _)| {
        (truths[i].0, truths[i].1.iter().all(|&v| v <= 0.0))
    });

    Ok(OptTraceRow {
        problem: problem.name.to_string(),
        method,
        replicate,
        iteration,
        best_feasible_true,
        identified_value,
        identified_feasible,
        confident_value: confident.map(|c| c.0),
        confident_feasible: confident.map(|c| c.1),
    })
}

fn fmt(v: f64) -> String {
    // 10 significant digits, stable across runs.
    format!("{v:.9e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn write_file(path: &Path, body: String) -> Result<(), BenchError> {
    std::fs::write(path, body)
        .map_err(|source| BenchError::Io { path: path.display().to_string(), source })
}

pub const QMC_CSV_HEADER: &str = "method,samples,replicate,relative_error,optimizer_distance";

pub fn emit_qmc_csv(rows: &[QmcStudyRow], path: &Path) -> Result<(), BenchError> {
    let mut body = String::from(QMC_CSV_HEADER);
    body.push('\n');
    for r in rows {
        body.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method,
            r.samples,
            r.replicate,
            fmt(r.relative_error),
            fmt(r.optimizer_distance)
        ));
    }
    write_file(path, body)
}

pub const OPT_CSV_HEADER: &str = "problem,method,replicate,iteration,best_feasible_true,identified_value,identified_feasible,confident_value,confident_feasible";

pub fn emit_opt_csv(rows: &[OptTraceRow], path: &Path) -> Result<(), BenchError> {
    let mut body = String::from(OPT_CSV_HEADER);
    body.push('\n');
    for r in rows {
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.problem,
            r.method,
            r.replicate,
            r.iteration,
            fmt_opt(r.best_feasible_true),
            fmt(r.identified_value),
            r.identified_feasible,
            fmt_opt(r.confident_value),
            r.confident_feasible.map(|b| b.to_string()).unwrap_or_default()
        ));
    }
    write_file(path, body)
}

/// Mean and standard error of the mean.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
