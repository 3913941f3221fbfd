//! Reference solver for the SVM dual: accelerated projected gradient with
//! an exact projection onto `{0 <= a <= C, y'a = 0}`. Slow, but shares no
//! code with SMO.

use ndarray::{Array2, ArrayView2};

use super::svm::{kernel_from_sq_dists, sq_dists};
use super::{check_two_classes, LearnError, SvmParams};

const MAX_N: usize = 50;
const MAX_ITERS: usize = 500_000;
const GRAD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Norm of the gradient mapping at exit.
    pub residual: f64,
}

/// Projection of `v` onto the box intersected with the label hyperplane.
/// `a(lam) = clip(v - lam*y, 0, C)` makes `y'a(lam)` non-increasing in
/// `lam`, so the root is bracketed and found by bisection.
fn project(v: &[f64], y: &[f64], c: f64, out: &mut [f64]) {
    let eval = |lam: f64, out: &mut [f64]| -> f64 {
        let mut s = 0.0;
        for ((o, &vi), &yi) in out.iter_mut().zip(v).zip(y) {
            *o = (vi - lam * yi).clamp(0.0, c);
            s += yi * *o;
        }
        s
    };
    let span = v.iter().fold(0.0f64, |m, x| m.max(x.abs())) + c + 1.0;
    let (mut lo, mut hi) = (-span, span);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if eval(mid, out) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    eval(0.5 * (lo + hi), out);
    // Remove the residual of the equality constraint on a free coordinate.
    let resid: f64 = out.iter().zip(y).map(|(a, b)| a * b).sum();
    if resid != 0.0 {
        if let Some(t) = (0..out.len()).find(|&t| out[t] > 0.0 && out[t] < c) {
            out[t] = (out[t] - resid * y[t]).clamp(0.0, c);
        }
    }
}

/// Maximizes the dual on a precomputed kernel matrix.
pub fn qp_oracle_kernel(kernel: &Array2<f64>, y: &[f64], c: f64) -> Result<OracleSolution, LearnError> {
    let n = y.len();
    if n > MAX_N {
        return Err(LearnError::TooFewSamples(format!("oracle supports n <= {MAX_N}, got {n}")));
    }
    check_two_classes(y)?;
    let q = Array2::from_shape_fn((n, n), |(i, j)| y[i] * y[j] * kernel[[i, j]]);
    // Gershgorin bound on the largest eigenvalue.
    let lip = q
        .outer_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let step = 1.0 / lip;
    // Minimize f(a) = 1/2 a'Qa - 1'a.
    let grad_at = |a: &[f64], g: &mut [f64]| {
        for i in 0..n {
            g[i] = (0..n).map(|j| q[[i, j]] * a[j]).sum::<f64>() - 1.0;
        }
    };
    let f_at = |a: &[f64], g: &[f64]| -> f64 { 0.5 * a.iter().zip(g).map(|(x, gi)| x * (gi - 1.0)).sum::<f64>() };

    let mut x = vec![0.0; n];
    let mut z = x.clone();
    let mut g = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut x_next = vec![0.0; n];
    let mut t = 1.0f64;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    grad_at(&x, &mut g);
    let mut f_prev = f_at(&x, &g);

    while iterations < MAX_ITERS {
        iterations += 1;
        grad_at(&z, &mut g);
        for i in 0..n {
            trial[i] = z[i] - step * g[i];
        }
        project(&trial, y, c, &mut x_next);

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        grad_at(&x_next, &mut g);
        let f_next = f_at(&x_next, &g);
        if f_next > f_prev && t > 1.0 {
            // Restart momentum when the objective goes up. A plain step
            // (t = 1) is always taken so rounding cannot stall the loop.
            z.copy_from_slice(&x);
            t = 1.0;
            continue;
        }
        let beta = (t - 1.0) / t_next;
        for i in 0..n {
            z[i] = x_next[i] + beta * (x_next[i] - x[i]);
        }
        x.copy_from_slice(&x_next);
        t = t_next;
        f_prev = f_next;

        // Gradient mapping at the current iterate.
        for i in 0..n {
            trial[i] = x[i] - step * g[i];
        }
        project(&trial, y, c, &mut x_next);
        residual = x.iter().zip(&x_next).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() * lip;
        if residual < GRAD_TOL {
            break;
        }
    }

    grad_at(&x, &mut g);
    let objective = -f_at(&x, &g);
    // Offset: average over free multipliers of y_i - sum_j a_j y_j K_ij,
    // else the midpoint of the feasible interval.
    let margin = |i: usize| y[i] - (0..n).map(|j| x[j] * y[j] * kernel[[i, j]]).sum::<f64>();
    let free_tol = 1e-8 * c.max(1.0);
    let free: Vec<usize> = (0..n).filter(|&i| x[i] > free_tol && x[i] < c - free_tol).collect();
    let bias = if free.is_empty() {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..n {
            let m = margin(i);
            let at_zero = x[i] <= free_tol;
            // a = 0 needs y f >= 1, a = C needs y f <= 1.
            if (y[i] > 0.0) == at_zero {
                lo = lo.max(m);
            } else {
                hi = hi.min(m);
            }
        }
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo,
            (false, true) => hi,
            _ => 0.0,
        }
    } else {
        free.iter().map(|&i| margin(i)).sum::<f64>() / free.len() as f64
    };
    Ok(OracleSolution {
        alpha: x,
        bias,
        objective,
        iterations,
        residual,
    })
}

pub fn qp_oracle(x: ArrayView2<f64>, y: &[f64], params: SvmParams) -> Result<OracleSolution, LearnError> {
    params.validate()?;
    let kernel = kernel_from_sq_dists(&sq_dists(x, x), params.gamma);
    qp_oracle_kernel(&kernel, y, params.c)
}
