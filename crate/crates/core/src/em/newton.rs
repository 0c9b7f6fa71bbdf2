//! Box-constrained damped Newton ascent for the small M-step blocks.

use crate::scalar::Scalar;

/// Objective value, gradient and negated Hessian (row-major) at a point.
pub(crate) struct Quadratic<F> {
    pub value: F,
    pub grad: Vec<F>,
    pub neg_hess: Vec<F>,
    /// Alternative positive semi-definite curvature tried when `neg_hess`
    /// is not positive definite.
    pub fallback: Option<Vec<F>>,
}

pub(crate) struct NewtonOptions<F> {
    pub max_iter: usize,
    pub bound: F,
}

pub(crate) struct NewtonOutcome<F> {
    pub x: Vec<F>,
    pub value: F,
    pub converged: bool,
}

/// In-place Cholesky factorisation of a symmetric matrix; `None` unless
/// positive definite.
pub(crate) fn cholesky<F: Scalar>(a: &[F], n: usize) -> Option<Vec<F>> {
    let mut l = vec![F::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s = s - l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > F::zero()) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

pub(crate) fn cholesky_solve<F: Scalar>(l: &[F], n: usize, b: &[F]) -> Vec<F> {
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s = s - l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s = s - l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// Newton direction from the curvature, with a growing ridge as last resort.
fn direction<F: Scalar>(q: &Quadratic<F>) -> Option<Vec<F>> {
    let n = q.grad.len();
    if let Some(l) = cholesky(&q.neg_hess, n) {
        return Some(cholesky_solve(&l, n, &q.grad));
    }
    let base = q.fallback.as_ref().unwrap_or(&q.neg_hess);
    let scale = (0..n).map(|i| base[i * n + i].abs()).fold(F::zero(), F::max).max(F::one());
    let mut ridge = F::lit(1e-10) * scale;
    for _ in 0..20 {
        let mut a = base.clone();
        for i in 0..n {
            a[i * n + i] = a[i * n + i] + ridge;
        }
        if let Some(l) = cholesky(&a, n) {
            return Some(cholesky_solve(&l, n, &q.grad));
        }
        ridge = ridge * F::lit(10.0);
    }
    None
}

/// Maximises `eval` from `x0` inside the box `[-bound, bound]^n`.
///
/// Every accepted step increases the objective, so the result is never
/// worse than the start.
pub(crate) fn maximize<F: Scalar>(
    x0: &[F],
    opts: &NewtonOptions<F>,
    mut eval: impl FnMut(&[F]) -> Quadratic<F>,
    mut value: impl FnMut(&[F]) -> F,
) -> NewtonOutcome<F> {
    let project = |v: F| v.max(-opts.bound).min(opts.bound);
    let mut x: Vec<F> = x0.iter().map(|&v| project(v)).collect();
    let mut q = eval(&x);
    let tol = F::epsilon().sqrt() * F::lit(1e-2);
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let Some(dir) = direction(&q) else { break };
        let decrement: F = dir.iter().zip(&q.grad).fold(F::zero(), |s, (d, g)| s + *d * *g);
        if !(decrement > tol * tol * (F::one() + q.value.abs())) {
            converged = true;
            break;
        }
        let mut step = F::one();
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<F> = x.iter().zip(&dir).map(|(&xi, &di)| project(xi + step * di)).collect();
            let gain: F = cand
                .iter()
                .zip(&x)
                .zip(&q.grad)
                .fold(F::zero(), |s, ((c, xi), g)| s + (*c - *xi) * *g);
            let v = value(&cand);
            if v.is_finite() && v >= q.value + F::lit(1e-4) * gain.max(F::zero()) && v >= q.value {
                accepted = Some(cand);
                break;
            }
            step = step * F::lit(0.5);
        }
        let Some(cand) = accepted else {
            converged = true;
            break;
        };
        let moved = cand.iter().zip(&x).map(|(a, b)| (*a - *b).abs()).fold(F::zero(), F::max);
        x = cand;
        q = eval(&x);
        if moved <= tol * F::lit(1e-2) {
            converged = true;
            break;
        }
    }
    NewtonOutcome { value: q.value, x, converged }
}
