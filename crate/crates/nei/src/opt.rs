//! Bounded local minimization: L-BFGS directions with a projected
//! backtracking line search.

use nalgebra::DVector;

use std::collections::VecDeque;

pub struct OptConfig {
    pub max_iters: usize,
    /// Convergence threshold on the projected gradient norm.
    pub grad_tol: f64,
    pub memory: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self { max_iters: 200, grad_tol: 1e-8, memory: 10 }
    }
}

pub struct OptOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    /// Whether the projected gradient tolerance was reached. Kept for
    /// diagnostics and tests; callers rank by value alone.
    #[allow(dead_code)]
    pub converged: bool,
}

fn clamp(x: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        x.iter().zip(lower.iter().zip(upper.iter())).map(|(&v, (&lo, &hi))| v.clamp(lo, hi)),
    )
}

/// Norm of the projected gradient, the first-order measure for box-bound
/// stationarity: components pushing against an active bound are zeroed.
fn projected_grad_norm(
    x: &DVector<f64>,
    grad: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let g = grad[i];
        let active = (x[i] <= lower[i] && g > 0.0) || (x[i] >= upper[i] && g < 0.0);
        if !active {
            acc += g * g;
        }
    }
    acc.sqrt()
}

/// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
///
/// `f` returns the objective value and its gradient. Non-finite objective
/// values abort the line search step; the best finite iterate seen is
/// returned.
pub fn minimize_bounded<F>(
    mut f: F,
    x0: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    cfg: &OptConfig,
) -> OptOutcome
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut x = clamp(x0, lower, upper);
    let (mut fx, mut grad) = f(&x);
    if !fx.is_finite() {
        return OptOutcome { x, value: f64::INFINITY, converged: false };
    }

    // (s, y) curvature pairs for the two-loop recursion.
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::new();
    let mut converged = false;

    for _ in 0..cfg.max_iters {
        if projected_grad_norm(&x, &grad, lower, upper) <= cfg.grad_tol {
            converged = true;
            break;
        }

        let mut dir = two_loop(&pairs, &grad);
        if dir.dot(&grad) >= 0.0 {
            // Not a descent direction (stale curvature); fall back to steepest
            // descent and drop the history.
            pairs.clear();
            dir = -&grad;
        }

        // Projected backtracking line search with an Armijo condition
        // measured against the actual projected step. If the quasi-Newton
        // direction fails, retry once along a scaled steepest descent.
        let mut found = line_search(&mut f, &x, fx, &grad, &dir, lower, upper);
        if found.is_none() && !pairs.is_empty() {
            pairs.clear();
            dir = -&grad / grad.norm().max(1.0);
            found = line_search(&mut f, &x, fx, &grad, &dir, lower, upper);
        }
        match found {
            Some((cand, fc, gc)) => {
                let s = &cand - &x;
                let y = &gc - &grad;
                if s.dot(&y) > 1e-12 * s.norm() * y.norm() {
                    pairs.push_back((s, y));
                    if pairs.len() > cfg.memory {
                        pairs.pop_front();
                    }
                } else {
                    // Negative curvature: the stored model no longer reflects
                    // the local Hessian, start over.
                    pairs.clear();
                }
                x = cand;
                fx = fc;
                grad = gc;
            }
            None => break,
        }
    }

    OptOutcome { x, value: fx, converged }
}

#[allow(clippy::type_complexity)]
fn line_search<F>(
    f: &mut F,
    x: &DVector<f64>,
    fx: f64,
    grad: &DVector<f64>,
    dir: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Option<(DVector<f64>, f64, DVector<f64>)>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut step = 1.0;
    let mut best: Option<(DVector<f64>, f64, DVector<f64>)> = None;
    for _ in 0..50 {
        let cand = clamp(&(x + step * dir), lower, upper);
        let delta = &cand - x;
        if delta.norm() < 1e-16 * x.norm().max(1.0) {
            return None;
        }
        let (fc, gc) = f(&cand);
        if fc.is_finite() && fc <= fx + 1e-4 * grad.dot(&delta) {
            best = Some((cand, fc, gc));
            break;
        }
        step *= 0.5;
    }
    let (_, mut best_f, _) = best.as_ref().map(|(c, v, g)| (c.clone(), *v, g.clone()))?;
    // Expansion: a stale quasi-Newton model can propose far-too-short steps;
    // keep doubling while the Armijo bound holds and the value improves.
    while step < 1e6 {
        step *= 2.0;
        let cand = clamp(&(x + step * dir), lower, upper);
        let delta = &cand - x;
        let (fc, gc) = f(&cand);
        if fc.is_finite() && fc <= fx + 1e-4 * grad.dot(&delta) && fc < best_f {
            best_f = fc;
            best = Some((cand, fc, gc));
        } else {
            break;
        }
    }
    best
}

fn two_loop(pairs: &VecDeque<(DVector<f64>, DVector<f64>)>, grad: &DVector<f64>) -> DVector<f64> {
    if pairs.is_empty() {
        return -grad;
    }
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let rho = 1.0 / s.dot(y);
        let alpha = rho * s.dot(&q);
        q -= alpha * y;
        alphas.push((alpha, rho));
    }
    let (s_last, y_last) = pairs.back().unwrap();
    let gamma = s_last.dot(y_last) / y_last.dot(y_last);
    let mut r = gamma * q;
    for ((s, y), &(alpha, rho)) in pairs.iter().zip(alphas.iter().rev()) {
        let beta = rho * y.dot(&r);
        r += (alpha - beta) * s;
    }
    -r
}
