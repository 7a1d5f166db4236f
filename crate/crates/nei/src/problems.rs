//! Synthetic constrained benchmark problems.
//!
//! Four classic test problems with known closed forms, each paired with a
//! Gaussian noise level per output so optimizers can be exercised in the
//! noisy regime. Feasibility convention: a constraint is satisfied when its
//! value is <= 0. All problems are minimization problems.
//!
//! Reference optima were computed offline with a dense-grid scan followed by
//! a local constrained polish and are frozen here as constants. Noise levels
//! without an external source are 20% of the empirical output range over a
//! 10^4-point quasirandom scan, rounded to one significant digit.

use nalgebra::{dvector, DVector};
use rand::Rng;
use thiserror::Error;

use crate::normal::inv_cdf;
use crate::space::SearchSpace;

use std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown problem name {0:?}")]
    UnknownName(String),
    #[error("point is outside the problem bounds: {0}")]
    OutOfBounds(String),
}

/// One noisy measurement of a problem's outputs: (mean, sd) pairs with the
/// true noise sds recorded alongside the perturbed means.
#[derive(Debug, Clone)]
pub struct NoisyEvaluation {
    pub objective: (f64, f64),
    pub constraints: Vec<(f64, f64)>,
}

/// A benchmark problem definition.
#[derive(Clone)]
pub struct Problem {
    pub name: &'static str,
    pub space: SearchSpace,
    pub num_constraints: usize,
    pub objective_noise_sd: f64,
    pub constraint_noise_sds: Vec<f64>,
    reference_x: DVector<f64>,
    reference_f: f64,
    eval: fn(&DVector<f64>) -> (f64, Vec<f64>),
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("dim", &self.space.dim())
            .field("num_constraints", &self.num_constraints)
            .finish()
    }
}

pub const PROBLEM_NAMES: [&str; 4] = ["gramacy", "gardner", "branin", "hartmann6"];

impl Problem {
    pub fn by_name(name: &str) -> Result<Self, ProblemError> {
        match name {
            "gramacy" => Ok(Self::gramacy()),
            "gardner" => Ok(Self::gardner()),
            "branin" => Ok(Self::branin()),
            "hartmann6" => Ok(Self::hartmann6()),
            other => Err(ProblemError::UnknownName(other.to_string())),
        }
    }

    pub fn all() -> Vec<Self> {
        PROBLEM_NAMES.iter().map(|n| Self::by_name(n).expect("registry name")).collect()
    }

    /// Linear objective with a sinusoidal and a norm constraint on the unit
    /// square (Gramacy et al. 2016 toy problem).
    pub fn gramacy() -> Self {
        Self {
            name: "gramacy",
            space: SearchSpace::from_bounds(&[(0.0, 1.0), (0.0, 1.0)]).unwrap(),
            num_constraints: 2,
            objective_noise_sd: 0.4,
            constraint_noise_sds: vec![0.7, 0.4],
            // Grid + polish oracle; the optimum sits on the sinusoidal
            // constraint boundary.
            reference_x: dvector![0.19512269, 0.40466537],
            reference_f: 0.5997880520100647,
            eval: |x| {
                let (x1, x2) = (x[0], x[1]);
                let f = x1 + x2;
                let c1 = 1.5 - x1 - 2.0 * x2 - 0.5 * (2.0 * PI * (x1 * x1 - 2.0 * x2)).sin();
                let c2 = x1 * x1 + x2 * x2 - 1.5;
                (f, vec![c1, c2])
            },
        }
    }

    /// Trigonometric objective and constraint on [0, 6]^2 (Gardner et al.
    /// 2014, first simulation).
    pub fn gardner() -> Self {
        Self {
            name: "gardner",
            space: SearchSpace::from_bounds(&[(0.0, 6.0), (0.0, 6.0)]).unwrap(),
            num_constraints: 1,
            objective_noise_sd: 0.8,
            constraint_noise_sds: vec![0.4],
            // Grid + polish oracle: optimum at (3π/2, 0) with value −2.
            reference_x: dvector![4.71238898038469, 0.0],
            reference_f: -2.0,
            eval: |x| {
                let (x1, x2) = (x[0], x[1]);
                let f = (2.0 * x1).cos() * x2.cos() + x1.sin();
                let c = x1.cos() * x2.cos() - x1.sin() * x2.sin() - 0.5;
                (f, vec![c])
            },
        }
    }

    /// Standard Branin objective with a disk constraint that leaves only one
    /// of the three global minima feasible (Gelbart et al. 2014 variant).
    pub fn branin() -> Self {
        Self {
            name: "branin",
            space: SearchSpace::from_bounds(&[(-5.0, 10.0), (0.0, 15.0)]).unwrap(),
            num_constraints: 1,
            objective_noise_sd: 5.0,
            constraint_noise_sds: vec![20.0],
            // The feasible Branin minimum at (π, 2.275).
            reference_x: dvector![3.14159266, 2.27500003],
            reference_f: 0.39788735772973993,
            eval: |x| {
                let (x1, x2) = (x[0], x[1]);
                let a = x2 - 5.1 / (4.0 * PI * PI) * x1 * x1 + 5.0 / PI * x1 - 6.0;
                let f = a * a + 10.0 * (1.0 - 1.0 / (8.0 * PI)) * x1.cos() + 10.0;
                let c = (x1 - 2.5).powi(2) + (x2 - 7.5).powi(2) - 50.0;
                (f, vec![c])
            },
        }
    }

    /// Six-dimensional Hartmann function with a unit-norm ball constraint;
    /// the canonical unconstrained argmin stays feasible.
    pub fn hartmann6() -> Self {
        Self {
            name: "hartmann6",
            space: SearchSpace::from_bounds(&[(0.0, 1.0); 6]).unwrap(),
            num_constraints: 1,
            objective_noise_sd: 0.2,
            constraint_noise_sds: vec![0.4],
            // Quasirandom scan + polish oracle; coincides with the canonical
            // unconstrained argmin (its norm is about 0.95).
            reference_x: dvector![
                0.2016895,
                0.15001068,
                0.47687397,
                0.27533242,
                0.31165161,
                0.65730053
            ],
            reference_f: -3.3223680114155067,
            eval: |x| {
                let f = hartmann6_value(x);
                let c = x.norm() - 1.0;
                (f, vec![c])
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    /// Noiseless objective and constraint values.
    pub fn evaluate_true(&self, x: &DVector<f64>) -> Result<(f64, Vec<f64>), ProblemError> {
        self.space.contains(x).map_err(|e| ProblemError::OutOfBounds(e.to_string()))?;
        Ok((self.eval)(x))
    }

    /// True values perturbed with Gaussian noise at the problem's per-output
    /// levels; the recorded sds are the true ones.
    pub fn evaluate_noisy(
        &self,
        x: &DVector<f64>,
        rng: &mut impl Rng,
    ) -> Result<NoisyEvaluation, ProblemError> {
        let (f, c) = self.evaluate_true(x)?;
        let mut draw = |sd: f64| {
            if sd == 0.0 {
                0.0
            } else {
                let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
                sd * inv_cdf(u).expect("u clamped inside (0,1)")
            }
        };
        Ok(NoisyEvaluation {
            objective: (f + draw(self.objective_noise_sd), self.objective_noise_sd),
            constraints: c
                .into_iter()
                .zip(self.constraint_noise_sds.iter())
                .map(|(v, &sd)| (v + draw(sd), sd))
                .collect(),
        })
    }

    /// The constrained optimum (location, value) from the offline oracle.
    pub fn reference_optimum(&self) -> (DVector<f64>, f64) {
        (self.reference_x.clone(), self.reference_f)
    }
}

const HARTMANN_A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];
const HARTMANN_P: [[f64; 6]; 4] = [
    [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
    [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
    [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
    [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
];
const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];

fn hartmann6_value(x: &DVector<f64>) -> f64 {
    let mut f = 0.0;
    for i in 0..4 {
        let mut inner = 0.0;
        for j in 0..6 {
            let d = x[j] - HARTMANN_P[i][j];
            inner += HARTMANN_A[i][j] * d * d;
        }
        f -= HARTMANN_ALPHA[i] * (-inner).exp();
    }
    f
}
