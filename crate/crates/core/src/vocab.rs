//! K-means visual vocabularies and bag-of-words histograms.
//!
//! The same code path serves raw patch vectors and auto-encoder latents;
//! only [`FeatureKind`] on the codebook differs.

use std::fmt;
use std::fs;
use std::path::Path;

use log::debug;
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Region;
use crate::seed;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("k-means needs at least k = {k} distinct vectors, got {n}")]
    TooFewVectors { n: usize, k: usize },
    #[error("k must be at least 1, got {0}")]
    InvalidK(usize),
    #[error("dimension mismatch: codebook has d = {expected}, vector has {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("no patch features for scope {0}")]
    EmptyRegion(String),
    #[error("non-finite input vector")]
    NonFinite,
    #[error("codebook file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Raw,
    Latent,
}

/// What a codebook describes: a region and either one metric or the
/// stacked group.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Scope {
    pub region: Region,
    pub group: String,
}

impl Scope {
    pub fn new(region: Region, group: impl Into<String>) -> Self {
        Self {
            region,
            group: group.into(),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.region.short_name(), self.group)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            k: 20,
            max_iters: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub k: usize,
    pub d: usize,
    pub scope: Scope,
    pub feature_kind: FeatureKind,
    pub fit_seed: u64,
    pub centroids: Vec<Vec<f64>>,
}

/// Codebook plus the diagnostics of the fit.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub codebook: Codebook,
    /// Word index of every input vector under the final centroids.
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step; the last entry is the final one.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KmeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_trace.last().expect("at least one assignment step")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowHistogram {
    pub scope: Scope,
    pub bins: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: &[f64]) -> f64 {
    match a.as_slice() {
        Some(a) => sq_dist_slice(a, b),
        None => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

/// Four independent accumulators so the loop vectorizes.
fn sq_dist_slice(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let t = x[l] - y[l];
            acc[l] += t * t;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Index of the nearest centroid and its squared distance; ties go to the
/// lowest index.
fn nearest(centroids: &[Vec<f64>], x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd assignment step with Hamerly bounds. A point keeps its centroid
/// without a full scan when the distance to it is strictly below both half
/// the gap from that centroid to its nearest neighbour and the point's lower
/// bound on the second-nearest distance; the result equals a full scan.
/// Negative entries of `lower` force a full scan.
fn assign(
    data: ArrayView2<f64>,
    centroids: &[Vec<f64>],
    labels: &mut [usize],
    dists: &mut [f64],
    lower: &mut [f64],
) -> f64 {
    let k = centroids.len();
    let half: Vec<f64> = (0..k)
        .map(|j| {
            let cj = ArrayView1::from(&centroids[j]);
            (0..k)
                .filter(|&l| l != j)
                .map(|l| sq_dist(cj, &centroids[l]))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
                / 2.0
        })
        .collect();
    let mut inertia = 0.0;
    for (i, row) in data.outer_iter().enumerate() {
        if lower[i] >= 0.0 {
            let d = sq_dist(row, &centroids[labels[i]]);
            let bound = half[labels[i]].max(lower[i]);
            if d.sqrt() < bound * (1.0 - 1e-12) {
                dists[i] = d;
                inertia += d;
                continue;
            }
        }
        let (mut best, mut second) = ((0, f64::INFINITY), f64::INFINITY);
        for (j, c) in centroids.iter().enumerate() {
            let d = sq_dist(row, c);
            if d < best.1 {
                second = best.1;
                best = (j, d);
            } else if d < second {
                second = d;
            }
        }
        labels[i] = best.0;
        dists[i] = best.1;
        lower[i] = second.sqrt();
        inertia += best.1;
    }
    inertia
}

fn plus_plus_seed(data: ArrayView2<f64>, k: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>, VocabError> {
    let n = data.nrows();
    let first = rng.gen_range(0..n);
    let mut centroids = vec![data.row(first).to_vec()];
    let mut d2: Vec<f64> = data.outer_iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(VocabError::TooFewVectors { n: centroids.len(), k });
        }
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            acc += w;
            if w > 0.0 && acc > target {
                pick = Some(i);
                break;
            }
        }
        // Rounding can leave `acc` just short of `target`.
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"));
        let c = data.row(pick).to_vec();
        for (i, r) in data.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, &c));
        }
        centroids.push(c);
    }
    Ok(centroids)
}

/// k-means++ seeding followed by Lloyd iterations until the largest
/// centroid shift drops below `tol` or `max_iters` is reached. Empty
/// clusters are moved onto the point farthest from its own centroid.
pub fn kmeans_fit(
    data: ArrayView2<f64>,
    config: &KmeansConfig,
    scope: Scope,
    feature_kind: FeatureKind,
    fit_seed: u64,
) -> Result<KmeansResult, VocabError> {
    let (n, d) = data.dim();
    let k = config.k;
    if k == 0 {
        return Err(VocabError::InvalidK(k));
    }
    if n < k {
        return Err(VocabError::TooFewVectors { n, k });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(VocabError::NonFinite);
    }
    let mut rng = seed::rng(fit_seed);
    let mut centroids = plus_plus_seed(data, k, &mut rng)?;
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut lower = vec![-1.0f64; n];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;
        trace.push(assign(data, &centroids, &mut labels, &mut dists, &mut lower));

        let mut sums = vec![vec![0.0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (row, &j) in data.outer_iter().zip(&labels) {
            counts[j] += 1;
            for (s, &v) in sums[j].iter_mut().zip(row.iter()) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        let mut shift = 0.0f64;
        for j in 0..k {
            let new = if counts[j] > 0 {
                sums[j].iter().map(|s| s / counts[j] as f64).collect::<Vec<_>>()
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None::<usize>, |best, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("n >= k leaves a point to take");
                taken[far] = true;
                dists[far] = 0.0;
                debug!("k-means: re-seeding empty cluster {j} at point {far}");
                data.row(far).to_vec()
            };
            shift = shift.max(sq_dist(ArrayView1::from(&new), &centroids[j]).sqrt());
            centroids[j] = new;
        }
        for l in lower.iter_mut().filter(|l| **l >= 0.0) {
            *l = (*l - shift).max(0.0);
        }
        if shift < config.tol {
            converged = true;
            break;
        }
    }
    trace.push(assign(data, &centroids, &mut labels, &mut dists, &mut lower));
    Ok(KmeansResult {
        codebook: Codebook {
            k,
            d,
            scope,
            feature_kind,
            fit_seed,
            centroids,
        },
        assignments: labels,
        inertia_trace: trace,
        iterations,
        converged,
    })
}

impl Codebook {
    fn check_dim(&self, found: usize) -> Result<(), VocabError> {
        if found != self.d {
            return Err(VocabError::DimMismatch {
                expected: self.d,
                found,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, VocabError> {
        serde_json::to_string(self).map_err(|e| VocabError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, VocabError> {
        let cb: Codebook = serde_json::from_str(text).map_err(|e| VocabError::Format(e.to_string()))?;
        if cb.k == 0 || cb.centroids.len() != cb.k || cb.centroids.iter().any(|c| c.len() != cb.d) {
            return Err(VocabError::Format(format!(
                "expected {} centroids of dimension {}",
                cb.k, cb.d
            )));
        }
        Ok(cb)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Nearest visual word; ties go to the lowest index.
pub fn quantize(codebook: &Codebook, vector: &[f64]) -> Result<usize, VocabError> {
    codebook.check_dim(vector.len())?;
    Ok(nearest(&codebook.centroids, ArrayView1::from(vector)).0)
}

/// Word frequencies of a set of features (rows), L1-normalized.
pub fn bow_histogram(codebook: &Codebook, features: ArrayView2<f64>) -> Result<BowHistogram, VocabError> {
    if features.nrows() == 0 {
        return Err(VocabError::EmptyRegion(codebook.scope.to_string()));
    }
    codebook.check_dim(features.ncols())?;
    let mut counts = vec![0usize; codebook.k];
    for row in features.axis_iter(Axis(0)) {
        counts[nearest(&codebook.centroids, row).0] += 1;
    }
    let n = features.nrows() as f64;
    Ok(BowHistogram {
        scope: codebook.scope.clone(),
        bins: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Rows of `n x d` values as an owned matrix.
pub fn to_matrix<T: Copy + Into<f64>>(values: &[T], d: usize) -> Array2<f64> {
    let n = values.len().checked_div(d).unwrap_or(0);
    Array2::from_shape_vec((n, d), values.iter().map(|&v| v.into()).collect()).expect("values.len() divisible by d")
}
