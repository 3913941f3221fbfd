//! Subject-level feature vectors: BoW bins, region means and the tabular
//! (demographic and clinical) columns, plus column standardization and the
//! CSV interchange format.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Label, MetricConfig, Region, SubjectRecord, CLINICAL_NAMES, DEMOGRAPHIC_NAMES};
use crate::vocab::{BowHistogram, Scope};

/// Group name of the multi-channel codebook scope.
pub const STACKED_GROUP: &str = "stacked";

/// Relative spread below which a column counts as constant. Features come
/// from f32 volumes, so smaller spreads are rounding residue.
const CONSTANT_REL_STD: f64 = 1e-7;

/// Whether a column with this mean and population std is constant.
pub fn is_constant(mean: f64, std: f64) -> bool {
    std <= CONSTANT_REL_STD * mean.abs().max(1.0)
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("histogram scopes do not match the metric config: {0}")]
    ScopeMismatch(String),
    #[error("subject {subject} has no {region}/{metric} volume")]
    MissingVolume {
        subject: String,
        region: String,
        metric: String,
    },
    #[error("feature shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("duplicate feature name {0}")]
    DuplicateName(String),
    #[error("feature csv: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How metrics are grouped into auto-encoder inputs and codebooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// One single-channel model shared by all regions per metric, one
    /// codebook per (region, metric).
    #[default]
    PerMetric,
    /// One multi-channel model over all metrics, one codebook per region.
    Stacked,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerMetric => "per-metric",
            Self::Stacked => "stacked",
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-metric" => Ok(Self::PerMetric),
            "stacked" => Ok(Self::Stacked),
            other => Err(format!("unknown scenario `{other}` (per-metric | stacked)")),
        }
    }
}

/// Codebook scopes in feature order: cc before thalamus, metrics in config
/// order.
pub fn scopes(config: &MetricConfig, scenario: Scenario) -> Vec<Scope> {
    match scenario {
        Scenario::PerMetric => config.pairs().map(|(r, m)| Scope::new(r, m)).collect(),
        Scenario::Stacked => config.regions().map(|r| Scope::new(r, STACKED_GROUP)).collect(),
    }
}

pub fn bin_names(scope: &Scope, k: usize) -> Vec<String> {
    let width = 2.max((k.saturating_sub(1)).to_string().len());
    (0..k).map(|j| format!("{scope}/bin{j:0width$}")).collect()
}

pub fn tabular_names() -> Vec<String> {
    DEMOGRAPHIC_NAMES
        .iter()
        .map(|n| format!("demo/{n}"))
        .chain(CLINICAL_NAMES.iter().map(|n| format!("clin/{n}")))
        .collect()
}

pub fn is_tabular(name: &str) -> bool {
    name.starts_with("demo/") || name.starts_with("clin/")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    fn push_tabular(&mut self, subject: &SubjectRecord) {
        self.names.extend(tabular_names());
        self.values.extend_from_slice(&subject.demographics);
        self.values.extend_from_slice(&subject.clinical);
    }
}

/// Concatenates histograms in scope order, then demographics and clinical
/// scores.
pub fn assemble_features(
    histograms: &[BowHistogram],
    config: &MetricConfig,
    scenario: Scenario,
    subject: &SubjectRecord,
) -> Result<FeatureVector, FeatureError> {
    let expected = scopes(config, scenario);
    let given: BTreeSet<&Scope> = histograms.iter().map(|h| &h.scope).collect();
    if given.len() != histograms.len() || given != expected.iter().collect() {
        let names: Vec<String> = histograms.iter().map(|h| h.scope.to_string()).collect();
        let want: Vec<String> = expected.iter().map(|s| s.to_string()).collect();
        return Err(FeatureError::ScopeMismatch(format!(
            "got [{}], expected [{}]",
            names.join(", "),
            want.join(", ")
        )));
    }
    let mut fv = FeatureVector {
        names: Vec::new(),
        values: Vec::new(),
    };
    for scope in &expected {
        let h = histograms.iter().find(|h| &h.scope == scope).expect("checked above");
        fv.names.extend(bin_names(scope, h.bins.len()));
        fv.values.extend_from_slice(&h.bins);
    }
    fv.push_tabular(subject);
    Ok(fv)
}

/// In-mask mean of every configured (region, metric) volume plus the
/// tabular columns.
pub fn region_mean_features(subject: &SubjectRecord, config: &MetricConfig) -> Result<FeatureVector, FeatureError> {
    let mut fv = FeatureVector {
        names: Vec::new(),
        values: Vec::new(),
    };
    for (region, metric) in config.pairs() {
        let vol = subject.volume(region, metric).ok_or_else(|| FeatureError::MissingVolume {
            subject: subject.id.clone(),
            region: region.name().into(),
            metric: metric.into(),
        })?;
        fv.names.push(format!("{}/{metric}/mean", region.short_name()));
        fv.values.push(vol.in_mask_mean());
    }
    fv.push_tabular(subject);
    Ok(fv)
}

/// Subjects x named features, with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub names: Vec<String>,
    pub labels: Vec<Label>,
    pub values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<String>, names: Vec<String>, labels: Vec<Label>, values: Array2<f64>) -> Result<Self, FeatureError> {
        if values.nrows() != ids.len() || ids.len() != labels.len() || values.ncols() != names.len() {
            return Err(FeatureError::ShapeMismatch(format!(
                "{}x{} values, {} ids, {} labels, {} names",
                values.nrows(),
                values.ncols(),
                ids.len(),
                labels.len(),
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(FeatureError::DuplicateName(dup.clone()));
        }
        Ok(Self {
            ids,
            names,
            labels,
            values,
        })
    }

    /// Stacks per-subject vectors; all must share one name list.
    pub fn from_vectors(ids: Vec<String>, labels: Vec<Label>, vectors: Vec<FeatureVector>) -> Result<Self, FeatureError> {
        let names = vectors.first().map(|v| v.names.clone()).unwrap_or_default();
        if let Some(bad) = vectors.iter().position(|v| v.names != names) {
            return Err(FeatureError::ShapeMismatch(format!("row {bad} has a different feature list")));
        }
        let d = names.len();
        let flat: Vec<f64> = vectors.into_iter().flat_map(|v| v.values).collect();
        let values = Array2::from_shape_vec((flat.len() / d.max(1), d), flat)
            .map_err(|e| FeatureError::ShapeMismatch(e.to_string()))?;
        Self::new(ids, names, labels, values)
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn imaging_columns(&self) -> Vec<usize> {
        (0..self.n_cols()).filter(|&j| !is_tabular(&self.names[j])).collect()
    }

    pub fn label_signs(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.sign()).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            names: self.names.clone(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            values: self.values.select(ndarray::Axis(0), rows),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self {
            ids: self.ids.clone(),
            names: cols.iter().map(|&j| self.names[j].clone()).collect(),
            labels: self.labels.clone(),
            values: self.values.select(ndarray::Axis(1), cols),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), FeatureError> {
        let mut w = csv::Writer::from_writer(File::create(path)?);
        let mut header = vec!["id".to_string()];
        header.extend(self.names.iter().cloned());
        header.push("label".into());
        w.write_record(&header)?;
        for (i, row) in self.values.outer_iter().enumerate() {
            let mut rec = vec![self.ids[i].clone()];
            // `{:?}` prints the shortest round-tripping decimal.
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            rec.push(self.labels[i].bit().to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let mut r = csv::Reader::from_reader(File::open(path)?);
        let header = r.headers()?.clone();
        let n = header.len();
        if n < 2 || &header[0] != "id" || &header[n - 1] != "label" {
            return Err(FeatureError::Format("header must be id, features..., label".into()));
        }
        let names: Vec<String> = header.iter().skip(1).take(n - 2).map(String::from).collect();
        let (mut ids, mut labels, mut flat) = (Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            ids.push(rec[0].to_string());
            for j in 1..n - 1 {
                let v: f64 = rec[j]
                    .parse()
                    .map_err(|_| FeatureError::Format(format!("row {}: bad number `{}`", line + 1, &rec[j])))?;
                flat.push(v);
            }
            let label = rec[n - 1]
                .parse::<u8>()
                .ok()
                .and_then(Label::from_bit)
                .ok_or_else(|| FeatureError::Format(format!("row {}: label must be 0 or 1", line + 1)))?;
            labels.push(label);
        }
        let values = Array2::from_shape_vec((ids.len(), names.len()), flat)
            .map_err(|e| FeatureError::ShapeMismatch(e.to_string()))?;
        Self::new(ids, names, labels, values)
    }
}

/// Per-column z-score parameters. Constant columns (see [`is_constant`])
/// map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(values: &Array2<f64>) -> Self {
        let n = values.nrows().max(1) as f64;
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for col in values.columns() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(var.sqrt());
        }
        Self { mean, std }
    }

    pub fn apply_row(&self, row: ArrayView1<f64>) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| if is_constant(m, s) { 0.0 } else { (v - m) / s })
            .collect()
    }

    pub fn apply(&self, values: &Array2<f64>) -> Array2<f64> {
        let mut out = values.clone();
        for mut row in out.rows_mut() {
            let z = self.apply_row(row.view());
            row.iter_mut().zip(z).for_each(|(o, v)| *o = v);
        }
        out
    }

    pub fn apply_matrix(&self, m: &FeatureMatrix) -> FeatureMatrix {
        FeatureMatrix {
            values: self.apply(&m.values),
            ..m.clone()
        }
    }
}

/// Convenience for logging and tests: the (region, group) scopes present
/// in a list of column names, in first-seen order.
pub fn name_scopes(names: &[String]) -> Vec<(Region, String)> {
    let mut out: Vec<(Region, String)> = Vec::new();
    for n in names {
        let mut parts = n.split('/');
        let (Some(r), Some(g)) = (parts.next(), parts.next()) else { continue };
        let region = match r {
            "cc" => Region::Cc,
            "thal" => Region::Thalamus,
            _ => continue,
        };
        if !out.iter().any(|(rr, gg)| *rr == region && gg == g) {
            out.push((region, g.to_string()));
        }
    }
    out
}
