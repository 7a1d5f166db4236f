//! Gaussian process regression with a Matérn 5/2 kernel.
//!
//! Observations carry per-point noise standard deviations (the standard
//! errors reported by an experiment), so the Gram matrix is
//! `K + diag(τ²) + jitter·I`. Hyperparameters are fitted by MAP: log-normal
//! priors over ARD lengthscales and signal variance, maximized with
//! multi-start bounded quasi-Newton ascent in log space. Inputs are
//! normalized to the unit cube and observation means standardized before
//! fitting, so the priors are problem-independent; predictions are reported
//! back in native units.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{
    cholesky_with_jitter, solve_lower, solve_spd, FactorizationError,
};
use crate::opt::{minimize_bounded, OptConfig};
use crate::qmc::SobolGenerator;
use crate::space::SearchSpace;
use crate::mix_seed;

use std::f64::consts::PI;

const SQRT5: f64 = 2.23606797749979;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("need at least 2 observations to fit a model, got {0}")]
    InsufficientData(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point has {got} coordinates, model has {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("posterior query point set is empty")]
    EmptyQuery,
    #[error("conditioning failed: {0}")]
    Conditioning(#[from] FactorizationError),
}

/// Kernel hyperparameters on the normalized (unit-cube, standardized) scale.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    /// One ARD lengthscale per input dimension, all positive.
    pub lengthscales: DVector<f64>,
    pub signal_variance: f64,
    /// Constant prior mean; zero for standardized data.
    pub mean_constant: f64,
}

/// Noisy observations of one metric: `y_i = f(x_i) + ε_i`, `ε_i ~ N(0, τ_i²)`.
#[derive(Debug, Clone)]
pub struct NoisyDataset {
    pub points: Vec<DVector<f64>>,
    pub means: Vec<f64>,
    pub noise_sds: Vec<f64>,
}

impl NoisyDataset {
    pub fn new(
        points: Vec<DVector<f64>>,
        means: Vec<f64>,
        noise_sds: Vec<f64>,
    ) -> Result<Self, GpError> {
        if points.len() != means.len() || points.len() != noise_sds.len() {
            return Err(GpError::InvalidArgument(format!(
                "points/means/noise_sds have lengths {}/{}/{}",
                points.len(),
                means.len(),
                noise_sds.len()
            )));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(GpError::InvalidArgument("observation means must be finite".into()));
        }
        if noise_sds.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(GpError::InvalidArgument("noise sds must be finite and >= 0".into()));
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(GpError::InvalidArgument("points must be finite".into()));
        }
        Ok(Self { points, means, noise_sds })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Joint posterior of the latent function values at a set of query points.
#[derive(Debug, Clone)]
pub struct MvnPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Affine maps between native and fitting coordinates.
#[derive(Debug, Clone)]
pub struct Normalization {
    pub x_lower: DVector<f64>,
    pub x_width: DVector<f64>,
    pub y_shift: f64,
    pub y_scale: f64,
}

impl Normalization {
    fn from_space(space: &SearchSpace, means: &[f64]) -> Self {
        let y_shift = means.iter().sum::<f64>() / means.len().max(1) as f64;
        let y_scale = if means.len() > 1 {
            let var = means.iter().map(|v| (v - y_shift).powi(2)).sum::<f64>()
                / (means.len() - 1) as f64;
            let sd = var.sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        } else {
            1.0
        };
        Self {
            x_lower: space.lower(),
            x_width: space.upper() - space.lower(),
            y_shift,
            y_scale,
        }
    }

    pub fn normalize_x(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.x_lower.iter().zip(self.x_width.iter()))
                .map(|(&v, (&lo, &w))| (v - lo) / w),
        )
    }

    fn standardize_y(&self, y: f64) -> f64 {
        (y - self.y_shift) / self.y_scale
    }
}

/// Settings for MAP hyperparameter fitting.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub starts: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { starts: 8, seed: 0, max_iters: 100 }
    }
}

// Log-space box for [log ℓ_1.., log σ²] during fitting.
const LOG_LS_MIN: f64 = -4.605170185988091; // ln 1e-2
const LOG_LS_MAX: f64 = 4.605170185988092; // ln 1e2
const LOG_SV_MIN: f64 = -13.815510557964274; // ln 1e-6
const LOG_SV_MAX: f64 = 9.210340371976184; // ln 1e4

/// Log-normal prior medians (standardized scale).
const PRIOR_LOG_LS_MEDIAN: f64 = -1.3862943611198906; // ln 0.25
const PRIOR_LOG_SV_MEDIAN: f64 = 0.0; // ln 1 = sample variance after standardization

/// Fitted GP with cached Cholesky factorization.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub params: KernelParams,
    pub norm: Normalization,
    /// Training inputs, normalized to the unit cube.
    pub(crate) x: Vec<DVector<f64>>,
    /// Standardized observation means.
    pub(crate) y: DVector<f64>,
    /// Standardized noise sds.
    pub(crate) tau: DVector<f64>,
    /// Lower Cholesky factor of K + diag(τ²) + jitter·I.
    pub(crate) chol: DMatrix<f64>,
    pub(crate) alpha: DVector<f64>,
    pub(crate) jitter: f64,
}

/// Matérn 5/2 covariance between two points, with ARD lengthscales.
pub fn matern52(x: &DVector<f64>, x2: &DVector<f64>, params: &KernelParams) -> Result<f64, GpError> {
    let d = params.lengthscales.len();
    if x.len() != d || x2.len() != d {
        return Err(GpError::DimensionMismatch { got: x.len().max(x2.len()), expected: d });
    }
    Ok(kernel(params, x, x2))
}

fn kernel(params: &KernelParams, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let r = scaled_distance(params, a, b);
    params.signal_variance * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * (-SQRT5 * r).exp()
}

fn scaled_distance(params: &KernelParams, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) / params.lengthscales[i];
        acc += d * d;
    }
    acc.sqrt()
}

pub(crate) fn kernel_matrix(params: &KernelParams, xs: &[DVector<f64>]) -> DMatrix<f64> {
    let n = xs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance;
        for j in 0..i {
            let v = kernel(params, &xs[i], &xs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

pub(crate) fn cross_kernel(
    params: &KernelParams,
    xs: &[DVector<f64>],
    x: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_iterator(xs.len(), xs.iter().map(|xi| kernel(params, x, xi)))
}

/// ∂k(x, xi)/∂x for each training point, an n×d matrix (normalized coords).
pub(crate) fn cross_kernel_grad(
    params: &KernelParams,
    xs: &[DVector<f64>],
    x: &DVector<f64>,
) -> DMatrix<f64> {
    let (n, d) = (xs.len(), x.len());
    let mut out = DMatrix::zeros(n, d);
    for (i, xi) in xs.iter().enumerate() {
        let r = scaled_distance(params, x, xi);
        // dk/dx_j = -(5/3)·σ²·(1 + √5 r)·exp(-√5 r)·(x_j - xi_j)/ℓ_j²
        let common =
            -(5.0 / 3.0) * params.signal_variance * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp();
        for j in 0..d {
            let lj = params.lengthscales[j];
            out[(i, j)] = common * (x[j] - xi[j]) / (lj * lj);
        }
    }
    out
}

/// Fits kernel hyperparameters by MAP and returns the ready-to-predict model.
pub fn fit_map(
    data: &NoisyDataset,
    space: &SearchSpace,
    cfg: &FitConfig,
) -> Result<GpModel, GpError> {
    let n = data.len();
    if n < 2 {
        return Err(GpError::InsufficientData(n));
    }
    let d = space.dim();
    for p in &data.points {
        if p.len() != d {
            return Err(GpError::DimensionMismatch { got: p.len(), expected: d });
        }
    }
    let norm = Normalization::from_space(space, &data.means);
    let x: Vec<DVector<f64>> = data.points.iter().map(|p| norm.normalize_x(p)).collect();
    let y = DVector::from_iterator(n, data.means.iter().map(|&v| norm.standardize_y(v)));
    let tau = DVector::from_iterator(n, data.noise_sds.iter().map(|&v| v / norm.y_scale));

    let lower = DVector::from_iterator(
        d + 1,
        (0..d).map(|_| LOG_LS_MIN).chain(std::iter::once(LOG_SV_MIN)),
    );
    let upper = DVector::from_iterator(
        d + 1,
        (0..d).map(|_| LOG_LS_MAX).chain(std::iter::once(LOG_SV_MAX)),
    );

    // Start points from a scrambled Sobol stream over a moderate box around
    // the prior medians.
    let mut gen = SobolGenerator::new(d + 1, mix_seed(cfg.seed, 0xF17))
        .expect("fit dimension within Sobol table");
    let start_lo: Vec<f64> = (0..d).map(|_| (0.05_f64).ln()).chain([(0.2_f64).ln()]).collect();
    let start_hi: Vec<f64> = (0..d).map(|_| (2.0_f64).ln()).chain([(5.0_f64).ln()]).collect();

    let objective = |theta: &DVector<f64>| {
        let (lp, grad) = log_posterior_with_grad(theta, &x, &y, &tau);
        (-lp, -grad)
    };

    let mut best: Option<(f64, DVector<f64>)> = None;
    for _ in 0..cfg.starts.max(1) {
        let u = gen.next_point();
        let theta0 = DVector::from_iterator(
            d + 1,
            u.iter()
                .enumerate()
                .map(|(i, &t)| start_lo[i] + t * (start_hi[i] - start_lo[i])),
        );
        let out = minimize_bounded(
            objective,
            &theta0,
            &lower,
            &upper,
            &OptConfig { max_iters: cfg.max_iters, grad_tol: 1e-5, memory: 10 },
        );
        if out.value.is_finite() && best.as_ref().is_none_or(|(v, _)| out.value < *v) {
            best = Some((out.value, out.x));
        }
    }
    let (_, theta) = best.ok_or_else(|| {
        GpError::InvalidArgument("hyperparameter optimization produced no finite value".into())
    })?;

    let params = KernelParams {
        lengthscales: DVector::from_iterator(d, theta.iter().take(d).map(|v| v.exp())),
        signal_variance: theta[d].exp(),
        mean_constant: 0.0,
    };
    GpModel::build(params, norm, x, y, tau)
}

/// Log posterior (marginal likelihood + log-normal priors) and gradient,
/// both with respect to log-scale parameters [log ℓ.., log σ²].
fn log_posterior_with_grad(
    theta: &DVector<f64>,
    x: &[DVector<f64>],
    y: &DVector<f64>,
    tau: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let d = theta.len() - 1;
    let n = x.len();
    let params = KernelParams {
        lengthscales: DVector::from_iterator(d, theta.iter().take(d).map(|v| v.exp())),
        signal_variance: theta[d].exp(),
        mean_constant: 0.0,
    };
    let kern = kernel_matrix(&params, x);
    let mut ky = kern.clone();
    for i in 0..n {
        ky[(i, i)] += tau[i] * tau[i];
    }
    let fact = match cholesky_with_jitter(&ky, params.signal_variance) {
        Ok(f) => f,
        Err(_) => return (f64::NEG_INFINITY, DVector::zeros(d + 1)),
    };
    let alpha = solve_spd(&fact.lower, y);
    let log_det_half: f64 = (0..n).map(|i| fact.lower[(i, i)].ln()).sum();
    let lml = -0.5 * y.dot(&alpha) - log_det_half - 0.5 * n as f64 * (2.0 * PI).ln();

    // K⁻¹ via the factorization, for the trace terms.
    let mut kinv = DMatrix::identity(n, n);
    fact.lower.solve_lower_triangular_mut(&mut kinv);
    fact.lower.tr_solve_lower_triangular_mut(&mut kinv);
    // d lml/dθ = 0.5·(αᵀ (dK/dθ) α − tr(K⁻¹ dK/dθ))
    let mut grad = DVector::zeros(d + 1);
    for p in 0..=d {
        let dk = kernel_derivative(&params, x, &kern, p, d);
        let quad = (&dk * &alpha).dot(&alpha);
        let trace: f64 = (0..n).map(|i| kinv.row(i).dot(&dk.column(i).transpose())).sum();
        grad[p] = 0.5 * (quad - trace);
    }

    // Log-normal priors on the log-scale parameters (unit log-sd).
    let mut lp = lml;
    for i in 0..d {
        let z = theta[i] - PRIOR_LOG_LS_MEDIAN;
        lp -= 0.5 * z * z;
        grad[i] -= z;
    }
    let z = theta[d] - PRIOR_LOG_SV_MEDIAN;
    lp -= 0.5 * z * z;
    grad[d] -= z;

    (lp, grad)
}

/// dK/d(log θ_p): p < d selects a lengthscale, p == d the signal variance.
fn kernel_derivative(
    params: &KernelParams,
    x: &[DVector<f64>],
    kern: &DMatrix<f64>,
    p: usize,
    d: usize,
) -> DMatrix<f64> {
    let n = x.len();
    let mut dk = DMatrix::zeros(n, n);
    if p == d {
        // dK/d log σ² = K (kernel part only).
        dk.copy_from(kern);
        return dk;
    }
    let lp = params.lengthscales[p];
    for i in 0..n {
        for j in 0..i {
            let r = scaled_distance(params, &x[i], &x[j]);
            let delta = (x[i][p] - x[j][p]) / lp;
            // dK/d log ℓ_p = (5/3)·σ²·(1+√5 r)·e^{−√5 r}·Δ_p²/ℓ_p² · ℓ_p... folded.
            let v = (5.0 / 3.0)
                * params.signal_variance
                * (1.0 + SQRT5 * r)
                * (-SQRT5 * r).exp()
                * delta
                * delta;
            dk[(i, j)] = v;
            dk[(j, i)] = v;
        }
    }
    dk
}

/// Prediction with gradients of the posterior mean and variance, native units.
pub struct PredictGrad {
    pub mean: f64,
    pub var: f64,
    pub d_mean: DVector<f64>,
    pub d_var: DVector<f64>,
}

impl GpModel {
    fn build(
        params: KernelParams,
        norm: Normalization,
        x: Vec<DVector<f64>>,
        y: DVector<f64>,
        tau: DVector<f64>,
    ) -> Result<Self, GpError> {
        let n = x.len();
        let mut ky = kernel_matrix(&params, &x);
        for i in 0..n {
            ky[(i, i)] += tau[i] * tau[i];
        }
        let fact = cholesky_with_jitter(&ky, params.signal_variance)?;
        let alpha = solve_spd(&fact.lower, &y);
        Ok(Self { params, norm, x, y, tau, chol: fact.lower, alpha, jitter: fact.jitter })
    }

    pub fn dim(&self) -> usize {
        self.params.lengthscales.len()
    }

    pub fn num_points(&self) -> usize {
        self.x.len()
    }

    /// Training inputs in native coordinates.
    pub fn points_native(&self) -> Vec<DVector<f64>> {
        self.x
            .iter()
            .map(|u| {
                DVector::from_iterator(
                    u.len(),
                    u.iter()
                        .zip(self.norm.x_lower.iter().zip(self.norm.x_width.iter()))
                        .map(|(&v, (&lo, &w))| lo + v * w),
                )
            })
            .collect()
    }

    /// Predictive standard deviations at or below this level are numerically
    /// indistinguishable from the jitter floor and treated as exactly zero by
    /// the acquisition functions.
    pub fn sd_floor(&self) -> f64 {
        (16.0 * self.jitter).sqrt() * self.norm.y_scale
    }

    /// Joint posterior of the latent values at `queries`, in native units.
    pub fn posterior(&self, queries: &[DVector<f64>]) -> Result<MvnPosterior, GpError> {
        if queries.is_empty() {
            return Err(GpError::EmptyQuery);
        }
        for q in queries {
            if q.len() != self.dim() {
                return Err(GpError::DimensionMismatch { got: q.len(), expected: self.dim() });
            }
        }
        let m = queries.len();
        let qn: Vec<DVector<f64>> = queries.iter().map(|q| self.norm.normalize_x(q)).collect();
        // Cross covariance, n×m.
        let mut kq = DMatrix::zeros(self.x.len(), m);
        for (j, q) in qn.iter().enumerate() {
            kq.set_column(j, &cross_kernel(&self.params, &self.x, q));
        }
        let mean_std = kq.transpose() * &self.alpha;
        let mut v = kq.clone();
        self.chol.solve_lower_triangular_mut(&mut v);
        let mut cov_std = kernel_matrix(&self.params, &qn) - v.transpose() * &v;
        // Symmetrize and clamp the diagonal; roundoff can leave tiny negatives.
        for i in 0..m {
            for j in 0..i {
                let s = 0.5 * (cov_std[(i, j)] + cov_std[(j, i)]);
                cov_std[(i, j)] = s;
                cov_std[(j, i)] = s;
            }
            if cov_std[(i, i)] < 0.0 {
                cov_std[(i, i)] = 0.0;
            }
        }
        let ys2 = self.norm.y_scale * self.norm.y_scale;
        Ok(MvnPosterior {
            mean: mean_std.map(|v| self.norm.y_shift + self.norm.y_scale * v),
            cov: cov_std * ys2,
        })
    }

    /// Marginal posterior mean and variance at one point, native units.
    pub fn predict(&self, x: &DVector<f64>) -> (f64, f64) {
        let xn = self.norm.normalize_x(x);
        let kvec = cross_kernel(&self.params, &self.x, &xn);
        let v = solve_lower(&self.chol, &kvec);
        let mean_std = kvec.dot(&self.alpha);
        let var_std = (self.params.signal_variance - v.dot(&v)).max(0.0);
        (
            self.norm.y_shift + self.norm.y_scale * mean_std,
            var_std * self.norm.y_scale * self.norm.y_scale,
        )
    }

    /// Prediction plus analytic gradients with respect to native coordinates.
    pub fn predict_with_grad(&self, x: &DVector<f64>) -> PredictGrad {
        let xn = self.norm.normalize_x(x);
        let kvec = cross_kernel(&self.params, &self.x, &xn);
        let mean_std = kvec.dot(&self.alpha);
        let var_std = {
            let v = solve_lower(&self.chol, &kvec);
            (self.params.signal_variance - v.dot(&v)).max(0.0)
        };
        let jac = cross_kernel_grad(&self.params, &self.x, &xn); // n×d
        let d_mean_std = jac.transpose() * &self.alpha;
        let kinv_k = solve_spd(&self.chol, &kvec);
        let d_var_std = -2.0 * (jac.transpose() * kinv_k);
        let ys = self.norm.y_scale;
        let scale_in = |v: DVector<f64>| {
            DVector::from_iterator(
                v.len(),
                v.iter().zip(self.norm.x_width.iter()).map(|(&g, &w)| g / w),
            )
        };
        PredictGrad {
            mean: self.norm.y_shift + ys * mean_std,
            var: var_std * ys * ys,
            d_mean: scale_in(d_mean_std) * ys,
            d_var: scale_in(d_var_std) * ys * ys,
        }
    }

    /// Observation means in native units.
    pub(crate) fn y_native(&self) -> Vec<f64> {
        self.y.iter().map(|&v| self.norm.y_shift + self.norm.y_scale * v).collect()
    }

    /// Observation noise sds in native units.
    pub(crate) fn tau_native(&self) -> Vec<f64> {
        self.tau.iter().map(|&v| v * self.norm.y_scale).collect()
    }

    /// Posterior mean at training point `i`, native units. A noiselessly
    /// observed point pins the posterior to the observation exactly, so the
    /// stored value is returned directly rather than through the jittered
    /// factorization.
    pub(crate) fn mean_at_train(&self, i: usize) -> f64 {
        if self.tau[i] == 0.0 {
            self.norm.y_shift + self.norm.y_scale * self.y[i]
        } else {
            let kvec = cross_kernel(&self.params, &self.x, &self.x[i]);
            self.norm.y_shift + self.norm.y_scale * kvec.dot(&self.alpha)
        }
    }

    /// A model with the same hyperparameters conditioned on noiseless values
    /// at `points` (native coordinates and units).
    pub fn condition_noiseless(
        &self,
        points: &[DVector<f64>],
        values: &[f64],
    ) -> Result<GpModel, GpError> {
        if points.len() != values.len() {
            return Err(GpError::InvalidArgument(format!(
                "{} points but {} values",
                points.len(),
                values.len()
            )));
        }
        let x: Vec<DVector<f64>> = points.iter().map(|p| self.norm.normalize_x(p)).collect();
        let y = DVector::from_iterator(values.len(), values.iter().map(|&v| self.norm.standardize_y(v)));
        let tau = DVector::zeros(values.len());
        GpModel::build(self.params.clone(), self.norm.clone(), x, y, tau)
    }
}
