//! Stratified folds, grid search, greedy forward selection and the
//! correlation-ranking baseline.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::svm::{kernel_from_sq_dists, solve_dual, sq_dists, svm_train, SmoConfig};
use super::{check_two_classes, LearnError, SvmParams};
use crate::features::Standardizer;
use crate::seed;

/// Fold index per sample. Each class is shuffled and dealt round-robin,
/// continuing the deal across classes, so per-fold class counts differ by
/// at most one.
pub fn stratified_folds(y: &[f64], k: usize, seed_value: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed_value);
    let mut folds = vec![0usize; y.len()];
    let mut next = 0usize;
    for positive in [true, false] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| (y[i] > 0.0) == positive).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[i] = next % k;
            next += 1;
        }
    }
    folds
}

fn fold_split(folds: &[usize], f: usize) -> (Vec<usize>, Vec<usize>) {
    (0..folds.len()).partition(|&i| folds[i] != f)
}

fn check_fold_inputs(x: ArrayView2<f64>, y: &[f64], k: usize) -> Result<(), LearnError> {
    if x.nrows() != y.len() {
        return Err(LearnError::DimMismatch {
            expected: y.len(),
            found: x.nrows(),
        });
    }
    check_two_classes(y)?;
    if k < 2 {
        return Err(LearnError::InvalidParams(format!("need at least 2 folds, got {k}")));
    }
    let pos = y.iter().filter(|&&v| v > 0.0).count();
    if pos.min(y.len() - pos) < 2 {
        return Err(LearnError::TooFewSamples("each class needs at least 2 samples for CV".into()));
    }
    Ok(())
}

/// Precomputed per-fold distance blocks.
struct FoldCache {
    train: Vec<usize>,
    val: Vec<usize>,
    y_train: Vec<f64>,
    d_train: Array2<f64>,
    d_cross: Array2<f64>,
}

impl FoldCache {
    fn correct(&self, y: &[f64], d_train: &Array2<f64>, d_cross: &Array2<f64>, params: SvmParams, smo: &SmoConfig) -> usize {
        let k = kernel_from_sq_dists(d_train, params.gamma);
        let Ok(sol) = solve_dual(&k, &self.y_train, params.c, smo.tol, smo.max_passes * self.train.len()) else {
            return 0;
        };
        let coef: Vec<f64> = sol.alpha.iter().zip(&self.y_train).map(|(a, b)| a * b).collect();
        self.val
            .iter()
            .enumerate()
            .filter(|&(r, &i)| {
                let f: f64 = d_cross
                    .row(r)
                    .iter()
                    .zip(&coef)
                    .filter(|(_, &c)| c != 0.0)
                    .map(|(&d, &c)| c * (-params.gamma * d).exp())
                    .sum::<f64>()
                    + sol.bias;
                (if f >= 0.0 { 1.0 } else { -1.0 }) == y[i]
            })
            .count()
    }
}

/// Pooled k-fold accuracy of the SVM on `x` (optionally standardized
/// within each fold's training rows).
pub fn cv_accuracy(
    x: ArrayView2<f64>,
    y: &[f64],
    folds: &[usize],
    params: SvmParams,
    standardize: bool,
    smo: &SmoConfig,
) -> Result<f64, LearnError> {
    let k = folds.iter().max().map_or(0, |m| m + 1);
    let mut correct = 0;
    for f in 0..k {
        let (train, val) = fold_split(folds, f);
        let xt = x.select(Axis(0), &train);
        let xv = x.select(Axis(0), &val);
        let (xt, xv) = if standardize {
            let st = Standardizer::fit(&xt);
            (st.apply(&xt), st.apply(&xv))
        } else {
            (xt, xv)
        };
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let model = svm_train(xt.view(), &yt, params, smo)?;
        for (r, &i) in val.iter().enumerate() {
            let f = model.decision(xv.row(r));
            if (if f >= 0.0 { 1.0 } else { -1.0 }) == y[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / y.len() as f64)
}

/// C values and gamma multipliers; gamma = multiplier / feature count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmGrid {
    #[serde(rename = "C")]
    pub c: Vec<f64>,
    pub gamma_scale: Vec<f64>,
    pub folds: usize,
}

impl Default for SvmGrid {
    fn default() -> Self {
        Self {
            c: vec![0.1, 1.0, 10.0, 100.0],
            gamma_scale: vec![0.001, 0.01, 0.1, 1.0],
            folds: 5,
        }
    }
}

impl SvmGrid {
    /// Grid points in tie-break order: C ascending, then gamma ascending.
    pub fn points(&self, d: usize) -> Vec<SvmParams> {
        let mut cs = self.c.clone();
        let mut gs = self.gamma_scale.clone();
        cs.sort_by(f64::total_cmp);
        gs.sort_by(f64::total_cmp);
        let d = d.max(1) as f64;
        cs.iter()
            .flat_map(|&c| gs.iter().map(move |&g| SvmParams { c, gamma: g / d }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: SvmParams,
    pub best_accuracy: f64,
    /// Every evaluated point with its CV accuracy, in tie-break order.
    pub table: Vec<(SvmParams, f64)>,
}

/// Stratified k-fold CV accuracy per grid point; best by accuracy, ties to
/// the smaller C, then the smaller gamma.
pub fn grid_search(
    x: ArrayView2<f64>,
    y: &[f64],
    grid: &SvmGrid,
    seed_value: u64,
    smo: &SmoConfig,
) -> Result<GridResult, LearnError> {
    let points = grid.points(x.ncols());
    if points.is_empty() {
        return Err(LearnError::EmptyGrid);
    }
    for p in &points {
        p.validate()?;
    }
    check_fold_inputs(x, y, grid.folds)?;
    let folds = stratified_folds(y, grid.folds, seed_value);
    let caches: Vec<FoldCache> = (0..grid.folds)
        .map(|f| {
            let (train, val) = fold_split(&folds, f);
            let xt = x.select(Axis(0), &train);
            let xv = x.select(Axis(0), &val);
            FoldCache {
                y_train: train.iter().map(|&i| y[i]).collect(),
                d_train: sq_dists(xt.view(), xt.view()),
                d_cross: sq_dists(xv.view(), xt.view()),
                train,
                val,
            }
        })
        .collect();
    let table: Vec<(SvmParams, f64)> = points
        .par_iter()
        .map(|&p| {
            let correct: usize = caches.iter().map(|c| c.correct(y, &c.d_train, &c.d_cross, p, smo)).sum();
            (p, correct as f64 / y.len() as f64)
        })
        .collect();
    let (best, best_accuracy) = table
        .iter()
        .fold(None::<(SvmParams, f64)>, |acc, &(p, a)| match acc {
            Some((_, ba)) if ba >= a => acc,
            _ => Some((p, a)),
        })
        .expect("non-empty grid");
    Ok(GridResult {
        best,
        best_accuracy,
        table,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub budget: usize,
    pub inner_folds: usize,
    /// SVM penalty used while scoring candidates.
    #[serde(rename = "C")]
    pub c: f64,
    /// Candidate gamma = gamma_scale / subset size.
    pub gamma_scale: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            budget: 10,
            inner_folds: 5,
            c: 1.0,
            gamma_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<usize>,
    pub names: Vec<String>,
    /// Inner-CV accuracy after each addition.
    pub accuracy_curve: Vec<f64>,
    pub budget: usize,
}

/// Greedy forward selection: each step adds the column whose inclusion
/// maximizes pooled stratified inner-CV accuracy (ties to the lowest
/// index). Columns are standardized within each inner fold.
pub fn forward_select(
    x: ArrayView2<f64>,
    y: &[f64],
    names: &[String],
    config: &SelectionConfig,
    seed_value: u64,
    smo: &SmoConfig,
) -> Result<SelectionResult, LearnError> {
    let d = x.ncols();
    if config.budget == 0 {
        return Err(LearnError::InvalidParams("selection budget must be at least 1".into()));
    }
    if config.budget > d {
        return Err(LearnError::BudgetExceedsFeatures {
            budget: config.budget,
            features: d,
        });
    }
    check_fold_inputs(x, y, config.inner_folds)?;
    let folds = stratified_folds(y, config.inner_folds, seed_value);

    struct Fold {
        cache: FoldCache,
        zt: Array2<f64>,
        zv: Array2<f64>,
    }
    let mut per_fold: Vec<Fold> = (0..config.inner_folds)
        .map(|f| {
            let (train, val) = fold_split(&folds, f);
            let xt = x.select(Axis(0), &train);
            let st = Standardizer::fit(&xt);
            let zt = st.apply(&xt);
            let zv = st.apply(&x.select(Axis(0), &val));
            let (nt, nv) = (train.len(), val.len());
            Fold {
                cache: FoldCache {
                    y_train: train.iter().map(|&i| y[i]).collect(),
                    d_train: Array2::zeros((nt, nt)),
                    d_cross: Array2::zeros((nv, nt)),
                    train,
                    val,
                },
                zt,
                zv,
            }
        })
        .collect();

    let add_column = |fold: &Fold, j: usize| -> (Array2<f64>, Array2<f64>) {
        let ct = fold.zt.column(j);
        let cv = fold.zv.column(j);
        let mut dt = fold.cache.d_train.clone();
        for ((a, b), v) in dt.indexed_iter_mut() {
            let diff = ct[a] - ct[b];
            *v += diff * diff;
        }
        let mut dc = fold.cache.d_cross.clone();
        for ((a, b), v) in dc.indexed_iter_mut() {
            let diff = cv[a] - ct[b];
            *v += diff * diff;
        }
        (dt, dc)
    };

    let mut selected: Vec<usize> = Vec::new();
    let mut curve = Vec::new();
    for step in 0..config.budget {
        let params = SvmParams {
            c: config.c,
            gamma: config.gamma_scale / (step + 1) as f64,
        };
        let candidates: Vec<usize> = (0..d).filter(|j| !selected.contains(j)).collect();
        let scores: Vec<usize> = candidates
            .par_iter()
            .map(|&j| {
                per_fold
                    .iter()
                    .map(|fold| {
                        let (dt, dc) = add_column(fold, j);
                        fold.cache.correct(y, &dt, &dc, params, smo)
                    })
                    .sum()
            })
            .collect();
        let (best_pos, best_correct) = scores
            .iter()
            .enumerate()
            .fold((0, 0usize), |(bp, bc), (p, &c)| if c > bc { (p, c) } else { (bp, bc) });
        let best = candidates[best_pos];
        for fold in &mut per_fold {
            let (dt, dc) = add_column(fold, best);
            fold.cache.d_train = dt;
            fold.cache.d_cross = dc;
        }
        selected.push(best);
        curve.push(best_correct as f64 / y.len() as f64);
    }
    Ok(SelectionResult {
        names: selected.iter().map(|&j| names.get(j).cloned().unwrap_or_else(|| format!("col{j}"))).collect(),
        selected,
        accuracy_curve: curve,
        budget: config.budget,
    })
}

/// Columns by |Pearson r| with the labels, descending; constant columns
/// score 0. Ties keep column order.
pub fn correlation_rank(x: ArrayView2<f64>, y: &[f64]) -> Vec<(usize, f64)> {
    let n = y.len() as f64;
    let yb: Vec<f64> = y.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    let ym = yb.iter().sum::<f64>() / n;
    let syy: f64 = yb.iter().map(|v| (v - ym) * (v - ym)).sum();
    let mut scores: Vec<(usize, f64)> = x
        .columns()
        .into_iter()
        .enumerate()
        .map(|(j, col)| {
            let xm = col.sum() / n;
            let sxx: f64 = col.iter().map(|v| (v - xm) * (v - xm)).sum();
            let sxy: f64 = col.iter().zip(&yb).map(|(a, b)| (a - xm) * (b - ym)).sum();
            let r = if crate::features::is_constant(xm, (sxx / n).sqrt()) || syy == 0.0 {
                0.0
            } else {
                (sxy / (sxx * syy).sqrt()).abs()
            };
            (j, r)
        })
        .collect();
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scores
}
