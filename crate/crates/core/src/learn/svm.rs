//! Soft-margin SVM dual solved by SMO with second-order working-set
//! selection.
//!
//! Dual: maximize `sum(a) - 1/2 a'Qa` with `Q_ij = y_i y_j K_ij`, subject to
//! `0 <= a_i <= C` and `y'a = 0`. Internally the solver minimizes the
//! negation and keeps the gradient `G = Qa - 1`.

use log::debug;
use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{check_two_classes, LearnError, SvmParams};

const TAU: f64 = 1e-12;
/// Multipliers at or below this are not stored as support vectors.
const SV_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoConfig {
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for SmoConfig {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_passes: 100,
        }
    }
}

pub fn rbf_kernel(x: &[f64], z: &[f64], gamma: f64) -> Result<f64, LearnError> {
    if x.len() != z.len() {
        return Err(LearnError::DimMismatch {
            expected: x.len(),
            found: z.len(),
        });
    }
    let d2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-gamma * d2).exp())
}

/// Pairwise squared Euclidean distances between rows of `a` and `b`.
pub fn sq_dists(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.outer_iter().enumerate() {
        for (j, rb) in b.outer_iter().enumerate() {
            out[[i, j]] = ra.iter().zip(rb.iter()).map(|(x, z)| (x - z) * (x - z)).sum();
        }
    }
    out
}

pub fn kernel_from_sq_dists(d2: &Array2<f64>, gamma: f64) -> Array2<f64> {
    d2.mapv(|v| (-gamma * v).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    /// Dual objective in maximization form.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `sum(a) - 1/2 sum_ij a_i a_j y_i y_j K_ij`
pub fn dual_objective(kernel: &Array2<f64>, y: &[f64], alpha: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        if alpha[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * kernel[[i, j]];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

/// SMO on a precomputed kernel matrix. Stops when the maximal violating
/// pair gap drops below `tol` or after `max_iter` pair updates; the
/// solution is returned either way with `converged` set accordingly.
pub fn solve_dual(kernel: &Array2<f64>, y: &[f64], c: f64, tol: f64, max_iter: usize) -> Result<DualSolution, LearnError> {
    let n = y.len();
    if kernel.dim() != (n, n) {
        return Err(LearnError::DimMismatch {
            expected: n,
            found: kernel.nrows(),
        });
    }
    check_two_classes(y)?;
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];
    let at_upper = |a: f64| a >= c;
    let at_lower = |a: f64| a <= 0.0;
    let mut iterations = 0;
    let mut converged = false;

    loop {
        // First index: maximal -y_t G_t over the "up" set.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let in_up = if y[t] > 0.0 { !at_upper(alpha[t]) } else { !at_lower(alpha[t]) };
            if in_up && -y[t] * grad[t] > gmax {
                gmax = -y[t] * grad[t];
                i_sel = Some(t);
            }
        }
        // Second index: largest second-order decrease over the "low" set.
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best_obj = f64::INFINITY;
        if let Some(i) = i_sel {
            for t in 0..n {
                let in_low = if y[t] > 0.0 { !at_lower(alpha[t]) } else { !at_upper(alpha[t]) };
                if !in_low {
                    continue;
                }
                let v = y[t] * grad[t];
                if v > gmax2 {
                    gmax2 = v;
                }
                let diff = gmax + v;
                if diff > 0.0 {
                    let mut quad = kernel[[i, i]] + kernel[[t, t]] - 2.0 * kernel[[i, t]];
                    if quad <= 0.0 {
                        quad = TAU;
                    }
                    let obj = -(diff * diff) / quad;
                    if obj < best_obj {
                        best_obj = obj;
                        j_sel = Some(t);
                    }
                }
            }
        }
        if gmax + gmax2 < tol {
            converged = true;
            break;
        }
        let (Some(i), Some(j)) = (i_sel, j_sel) else {
            converged = true;
            break;
        };
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let kij = kernel[[i, j]];
        let mut quad = kernel[[i, i]] + kernel[[j, j]] - 2.0 * kij;
        if quad <= 0.0 {
            quad = TAU;
        }
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * kernel[[i, t]] * di + y[j] * kernel[[j, t]] * dj);
        }
    }
    if !converged {
        debug!("smo: iteration cap {max_iter} reached");
    }

    // Offset from free multipliers, else the midpoint of the feasible range.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if at_upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if at_lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };
    let objective = -0.5 * alpha.iter().zip(&grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>();
    Ok(DualSolution {
        alpha,
        bias: -rho,
        objective,
        iterations,
        converged,
    })
}

/// Counts KKT violations of a dual solution at tolerance `tol`:
/// `a = 0 => y f >= 1 - tol`, `0 < a < C => |y f - 1| <= tol`,
/// `a = C => y f <= 1 + tol`.
pub fn kkt_violations(kernel: &Array2<f64>, y: &[f64], alpha: &[f64], bias: f64, c: f64, tol: f64) -> usize {
    let n = y.len();
    (0..n)
        .filter(|&i| {
            let f: f64 = (0..n).map(|j| alpha[j] * y[j] * kernel[[i, j]]).sum::<f64>() + bias;
            let m = y[i] * f;
            if alpha[i] <= SV_EPS {
                m < 1.0 - tol
            } else if alpha[i] >= c - SV_EPS * c.max(1.0) {
                m > 1.0 + tol
            } else {
                (m - 1.0).abs() > tol
            }
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub params: SvmParams,
    pub support_vectors: Vec<Vec<f64>>,
    /// `a_i * y_i` per support vector.
    pub dual_coef: Vec<f64>,
    pub bias: f64,
    pub feature_names: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
}

impl SvmModel {
    pub(crate) fn from_solution(x: ArrayView2<f64>, y: &[f64], params: SvmParams, sol: &DualSolution) -> Self {
        let mut support_vectors = Vec::new();
        let mut dual_coef = Vec::new();
        for (i, &a) in sol.alpha.iter().enumerate() {
            if a > SV_EPS {
                support_vectors.push(x.row(i).to_vec());
                dual_coef.push(a * y[i]);
            }
        }
        Self {
            params,
            support_vectors,
            dual_coef,
            bias: sol.bias,
            feature_names: Vec::new(),
            converged: sol.converged,
            iterations: sol.iterations,
            objective: sol.objective,
        }
    }

    pub fn dim(&self) -> usize {
        self.support_vectors.first().map_or(0, Vec::len)
    }

    pub fn decision(&self, x: ArrayView1<f64>) -> f64 {
        let mut f = self.bias;
        for (sv, &coef) in self.support_vectors.iter().zip(&self.dual_coef) {
            let d2: f64 = sv.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            f += coef * (-self.params.gamma * d2).exp();
        }
        f
    }
}

/// Trains on rows of `x` with labels `y` in {-1, +1}. Hitting the
/// iteration cap (`max_passes * n`) still returns a model, flagged
/// `converged = false`.
pub fn svm_train(x: ArrayView2<f64>, y: &[f64], params: SvmParams, config: &SmoConfig) -> Result<SvmModel, LearnError> {
    params.validate()?;
    if x.nrows() != y.len() {
        return Err(LearnError::DimMismatch {
            expected: y.len(),
            found: x.nrows(),
        });
    }
    check_two_classes(y)?;
    let kernel = kernel_from_sq_dists(&sq_dists(x, x), params.gamma);
    let sol = solve_dual(&kernel, y, params.c, config.tol, config.max_passes * y.len())?;
    Ok(SvmModel::from_solution(x, y, params, &sol))
}

/// `(label, decision value)`; a zero decision counts as positive.
pub fn svm_predict(model: &SvmModel, x: &[f64]) -> Result<(f64, f64), LearnError> {
    if model.dim() != 0 && x.len() != model.dim() {
        return Err(LearnError::DimMismatch {
            expected: model.dim(),
            found: x.len(),
        });
    }
    let f = model.decision(ArrayView1::from(x));
    Ok((if f >= 0.0 { 1.0 } else { -1.0 }, f))
}
