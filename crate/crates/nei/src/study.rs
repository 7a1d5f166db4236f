//! Ask-tell study lifecycle.
//!
//! A study owns the search space, the trial history with per-observation
//! standard errors, and the configuration of the acquisition machinery.
//! Operations are value-oriented: they take a state and return an updated
//! state. Persistence is a JSON document written atomically.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acq::{
    generate_batch, AcqError, AcqMethod, BatchConfig, SampleMode,
};
use crate::gp::{fit_map, FitConfig, GpError, GpModel, NoisyDataset};
use crate::mix_seed;
use crate::normal::cdf;
use crate::qmc::{QmcError, SobolGenerator};
use crate::space::{SearchSpace, SpaceError};

use std::path::Path;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("need at least one completed trial")]
    InsufficientData,
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Acq(#[from] AcqError),
    #[error(transparent)]
    Qmc(#[from] QmcError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("study file parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("study file has schema version {found}, this build reads {SCHEMA_VERSION}")]
    IncompatibleVersion { found: u64 },
}

/// One reported output: a mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialStatus {
    Pending,
    Completed,
}

/// One suggested or evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub x: Vec<f64>,
    pub objective: Option<Measurement>,
    pub constraints: Option<Vec<Measurement>>,
    pub status: TrialStatus,
    pub tag: String,
}

impl TrialRecord {
    pub fn point(&self) -> DVector<f64> {
        DVector::from_vec(self.x.clone())
    }
}

/// A completed observation handed to `tell`.
#[derive(Debug, Clone)]
pub struct Observation {
    pub x: DVector<f64>,
    pub objective: (f64, f64),
    pub constraints: Vec<(f64, f64)>,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    /// Fantasy draws per acquisition evaluation.
    pub sample_count: usize,
    /// Local optimizer restarts per candidate.
    pub restarts: usize,
    pub seed: u64,
    /// Quasirandom initialization size; 0 resolves to min(2d + 2, 30).
    pub init_points: usize,
    /// Per-constraint confidence for the conservative identification rule.
    pub delta: f64,
    pub method: AcqMethod,
    pub sample_mode: SampleMode,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            sample_count: 32,
            restarts: 20,
            seed: 0,
            init_points: 0,
            delta: 0.05,
            method: AcqMethod::Nei,
            sample_mode: SampleMode::Qmc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyState {
    pub schema_version: u64,
    pub space: SearchSpace,
    pub num_constraints: usize,
    pub config: StudyConfig,
    pub trials: Vec<TrialRecord>,
}

/// Creates an empty study over `space` with `num_constraints` constraints.
pub fn create_study(
    space: SearchSpace,
    num_constraints: usize,
    mut config: StudyConfig,
) -> Result<StudyState, StudyError> {
    if config.init_points == 0 {
        config.init_points = (2 * space.dim() + 2).min(30);
    }
    if !(config.delta > 0.0 && config.delta < 1.0) {
        return Err(StudyError::InvalidArgument(format!(
            "delta must lie in (0, 1), got {}",
            config.delta
        )));
    }
    if config.sample_count == 0 || config.restarts == 0 {
        return Err(StudyError::InvalidArgument(
            "sample_count and restarts must be >= 1".into(),
        ));
    }
    Ok(StudyState {
        schema_version: SCHEMA_VERSION,
        space,
        num_constraints,
        config,
        trials: Vec::new(),
    })
}

impl StudyState {
    pub fn completed(&self) -> Vec<&TrialRecord> {
        self.trials.iter().filter(|t| t.status == TrialStatus::Completed).collect()
    }

    pub fn pending_points(&self) -> Vec<DVector<f64>> {
        self.trials
            .iter()
            .filter(|t| t.status == TrialStatus::Pending)
            .map(|t| t.point())
            .collect()
    }

    /// Ingests completed observations. A pending trial at the same point is
    /// marked completed; re-telling an identical (x, tag) pair overwrites
    /// that trial instead of appending.
    pub fn tell(&self, observations: &[Observation]) -> Result<StudyState, StudyError> {
        let mut next = self.clone();
        for obs in observations {
            self.space.contains(&obs.x)?;
            if obs.constraints.len() != self.num_constraints {
                return Err(StudyError::InvalidArgument(format!(
                    "observation has {} constraints, study has {}",
                    obs.constraints.len(),
                    self.num_constraints
                )));
            }
            let sds_ok = obs.objective.1 >= 0.0 && obs.constraints.iter().all(|c| c.1 >= 0.0);
            let finite = obs.objective.0.is_finite()
                && obs.objective.1.is_finite()
                && obs.constraints.iter().all(|c| c.0.is_finite() && c.1.is_finite());
            if !sds_ok || !finite {
                return Err(StudyError::InvalidArgument(
                    "observation means must be finite and sds finite and >= 0".into(),
                ));
            }
            let xs: Vec<f64> = obs.x.iter().copied().collect();
            let record = TrialRecord {
                x: xs.clone(),
                objective: Some(Measurement { mean: obs.objective.0, sd: obs.objective.1 }),
                constraints: Some(
                    obs.constraints
                        .iter()
                        .map(|&(mean, sd)| Measurement { mean, sd })
                        .collect(),
                ),
                status: TrialStatus::Completed,
                tag: obs.tag.clone(),
            };
            if let Some(t) = next
                .trials
                .iter_mut()
                .find(|t| t.status == TrialStatus::Completed && t.x == xs && t.tag == obs.tag)
            {
                *t = record;
            } else if let Some(t) = next
                .trials
                .iter_mut()
                .find(|t| t.status == TrialStatus::Pending && t.x == xs)
            {
                *t = record;
            } else {
                next.trials.push(record);
            }
        }
        Ok(next)
    }

    /// Suggests `q` configurations and records them as pending.
    ///
    /// Until the initialization budget is spent the suggestions come from a
    /// scrambled quasirandom sequence; afterwards models are fitted to the
    /// completed trials and the acquisition optimizer takes over.
    pub fn suggest(&self, q: usize) -> Result<(StudyState, Vec<DVector<f64>>), StudyError> {
        if q == 0 {
            return Err(StudyError::InvalidArgument("q must be >= 1".into()));
        }
        let completed = self.completed();
        let points = if completed.len() < self.config.init_points || completed.len() < 2 {
            // Continue the one quasirandom stream across calls by skipping
            // the entries already handed out.
            let mut gen = SobolGenerator::with_options(
                self.space.dim(),
                Some(mix_seed(self.config.seed, 0x1417)),
                1 + self.trials.len(),
            )?;
            (0..q)
                .map(|_| {
                    let u = DVector::from_vec(gen.next_point());
                    self.space.round_integers(&self.space.denormalize(&u))
                })
                .collect()
        } else {
            let (objective, constraints) = self.fit_models()?;
            let cfg = BatchConfig {
                q,
                restarts: self.config.restarts,
                sample_count: self.config.sample_count,
                seed: mix_seed(self.config.seed, self.trials.len() as u64),
                method: self.config.method,
                sample_mode: self.config.sample_mode,
            };
            generate_batch(&objective, &constraints, &self.space, &self.pending_points(), &cfg)?
        };
        let mut next = self.clone();
        for (i, p) in points.iter().enumerate() {
            next.trials.push(TrialRecord {
                x: p.iter().copied().collect(),
                objective: None,
                constraints: None,
                status: TrialStatus::Pending,
                tag: format!("suggest-{}", self.trials.len() + i),
            });
        }
        Ok((next, points))
    }

    /// Fits the objective and constraint models to the completed trials.
    pub fn fit_models(&self) -> Result<(GpModel, Vec<GpModel>), StudyError> {
        let completed = self.completed();
        if completed.len() < 2 {
            return Err(StudyError::InsufficientData);
        }
        let points: Vec<DVector<f64>> = completed.iter().map(|t| t.point()).collect();
        let fit_cfg = FitConfig { seed: self.config.seed, ..FitConfig::default() };
        let obj_data = NoisyDataset::new(
            points.clone(),
            completed.iter().map(|t| t.objective.expect("completed trial").mean).collect(),
            completed.iter().map(|t| t.objective.expect("completed trial").sd).collect(),
        )?;
        let objective = fit_map(&obj_data, &self.space, &fit_cfg)?;
        let mut constraints = Vec::with_capacity(self.num_constraints);
        for j in 0..self.num_constraints {
            let data = NoisyDataset::new(
                points.clone(),
                completed
                    .iter()
                    .map(|t| t.constraints.as_ref().expect("completed trial")[j].mean)
                    .collect(),
                completed
                    .iter()
                    .map(|t| t.constraints.as_ref().expect("completed trial")[j].sd)
                    .collect(),
            )?;
            constraints.push(fit_map(&data, &self.space, &fit_cfg)?);
        }
        Ok((objective, constraints))
    }

    /// Posterior moments at every completed trial, for identification.
    pub fn trial_moments(&self) -> Result<Vec<TrialMoments>, StudyError> {
        let completed = self.completed();
        if completed.is_empty() {
            return Err(StudyError::InsufficientData);
        }
        let (objective, constraints) = self.fit_models()?;
        Ok(completed
            .iter()
            .map(|t| {
                let x = t.point();
                let (mu_f, _) = objective.predict(&x);
                let cons = constraints
                    .iter()
                    .map(|c| {
                        let (mu, var) = c.predict(&x);
                        (mu, var.max(0.0).sqrt().max(1e-12))
                    })
                    .collect();
                TrialMoments { mu_f, constraints: cons }
            })
            .collect())
    }

    /// The completed trial with the largest expected objective reduction
    /// below baseline `b`, weighted by the feasibility probability. With no
    /// baseline given, the largest posterior mean over completed trials is
    /// used.
    pub fn identify_best_expected_reduction(
        &self,
        b: Option<f64>,
    ) -> Result<(usize, f64), StudyError> {
        let moments = self.trial_moments()?;
        let b = b.unwrap_or_else(|| {
            moments.iter().map(|m| m.mu_f).fold(f64::NEG_INFINITY, f64::max)
        });
        Ok(pick_best_expected_reduction(&moments, b))
    }

    /// The completed trial with the smallest posterior objective mean among
    /// those meeting every constraint with probability at least 1 − delta.
    pub fn identify_best_confident_feasible(
        &self,
        delta: Option<f64>,
    ) -> Result<Option<(usize, f64)>, StudyError> {
        let delta = delta.unwrap_or(self.config.delta);
        if !(delta > 0.0 && delta < 1.0) {
            return Err(StudyError::InvalidArgument(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        let moments = self.trial_moments()?;
        Ok(pick_best_confident_feasible(&moments, delta))
    }

    /// Atomic save: write to a sibling temp file, then rename into place.
    pub fn save(&self, path: &Path) -> Result<(), StudyError> {
        let body = serde_json::to_string_pretty(self)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Posterior moments of one completed trial: objective mean and per
/// constraint (mean, sd).
#[derive(Debug, Clone)]
pub struct TrialMoments {
    pub mu_f: f64,
    pub constraints: Vec<(f64, f64)>,
}

impl TrialMoments {
    /// Product over constraints of the posterior probability of `c <= 0`.
    pub fn feasibility_product(&self) -> f64 {
        self.constraints.iter().map(|&(mu, sd)| cdf(-mu / sd)).product()
    }
}

/// Argmax of `(b − mu_f)·∏_j Φ(−mu_j/sd_j)`; ties go to the higher
/// feasibility product, then to the earliest index.
pub fn pick_best_expected_reduction(moments: &[TrialMoments], b: f64) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (i, m) in moments.iter().enumerate() {
        let p = m.feasibility_product();
        let score = (b - m.mu_f) * p;
        if score > best.1 || (score == best.1 && p > best.2) {
            best = (i, score, p);
        }
    }
    (best.0, best.1)
}

/// Smallest objective mean among trials whose every constraint holds with
/// probability >= 1 − delta; absent when none qualify.
pub fn pick_best_confident_feasible(
    moments: &[TrialMoments],
    delta: f64,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in moments.iter().enumerate() {
        let qualifies = m.constraints.iter().all(|&(mu, sd)| cdf(-mu / sd) >= 1.0 - delta);
        if qualifies && best.is_none_or(|(_, v)| m.mu_f < v) {
            best = Some((i, m.mu_f));
        }
    }
    best
}

/// Loads a study, verifying the schema version and warning about unknown
/// top-level fields.
pub fn load_study(path: &Path) -> Result<StudyState, StudyError> {
    let body = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&body)?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| StudyError::InvalidArgument("missing schema_version".into()))?;
    if found != SCHEMA_VERSION {
        return Err(StudyError::IncompatibleVersion { found });
    }
    if let Some(map) = value.as_object() {
        const KNOWN: [&str; 5] =
            ["schema_version", "space", "num_constraints", "config", "trials"];
        for key in map.keys() {
            if !KNOWN.contains(&key.as_str()) {
                eprintln!("warning: ignoring unknown study field {key:?}");
            }
        }
    }
    Ok(serde_json::from_value(value)?)
}
