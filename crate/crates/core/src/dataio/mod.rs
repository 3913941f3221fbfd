//! Dataset model, on-disk formats and phantom generation.

mod dbv;
mod manifest;
mod phantom;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use dbv::{companion_mask_path, read_volume, read_volume_with_mask, write_mask, write_volume};
pub use manifest::{load_dataset, save_dataset};
pub use phantom::{generate_phantom_dataset, metric_profile, PhantomSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: not a DBV1 file")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated file, expected {expected} bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: non-finite value at voxel {index}")]
    NonFinite { path: PathBuf, index: usize },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("manifest schema error: {0}")]
    Schema(String),
    #[error("missing volume file {path}")]
    MissingVolume { path: PathBuf },
    #[error("subject {subject}: metric {region}/{metric} {problem}")]
    MetricMismatch {
        subject: String,
        region: String,
        metric: String,
        problem: &'static str,
    },
    #[error("duplicate subject id {0}")]
    DuplicateId(String),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Analysed brain region. Ordering puts `Cc` first, which fixes the feature
/// column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Cc,
    Thalamus,
}

impl Region {
    pub const ALL: [Region; 2] = [Region::Cc, Region::Thalamus];

    pub fn name(self) -> &'static str {
        match self {
            Region::Cc => "cc",
            Region::Thalamus => "thalamus",
        }
    }

    /// Prefix used in feature names.
    pub fn short_name(self) -> &'static str {
        match self {
            Region::Cc => "cc",
            Region::Thalamus => "thal",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cc" => Ok(Region::Cc),
            "thalamus" | "thal" => Ok(Region::Thalamus),
            other => Err(DataError::Schema(format!("unknown region `{other}`"))),
        }
    }
}

/// Binary class; patients are the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Control,
    Patient,
}

impl Label {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Label::Control),
            1 => Some(Label::Patient),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::Control => 0,
            Label::Patient => 1,
        }
    }

    /// +1 for patients, -1 for controls.
    pub fn sign(self) -> f64 {
        match self {
            Label::Control => -1.0,
            Label::Patient => 1.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Patient
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.bit())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let bit = u8::deserialize(deserializer)?;
        Label::from_bit(bit).ok_or_else(|| serde::de::Error::custom("label must be 0 or 1"))
    }
}

/// One scalar 3D grid for one metric in one region, with its region mask.
/// Storage is x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricVolume {
    dims: [usize; 3],
    values: Vec<f32>,
    mask: Vec<bool>,
}

impl MetricVolume {
    pub fn new(dims: [usize; 3], values: Vec<f32>, mask: Vec<bool>) -> Result<Self, DataError> {
        let len = dims.iter().product::<usize>();
        if dims.contains(&0) {
            return Err(DataError::InvalidVolume(format!("zero dimension in {dims:?}")));
        }
        if values.len() != len || mask.len() != len {
            return Err(DataError::InvalidVolume(format!(
                "dims {dims:?} need {len} voxels, got {} values and {} mask flags",
                values.len(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(DataError::InvalidVolume("mask is empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::InvalidVolume(format!("non-finite value at voxel {i}")));
        }
        Ok(Self { dims, values, mask })
    }

    /// Volume with an all-ones mask.
    pub fn unmasked(dims: [usize; 3], values: Vec<f32>) -> Result<Self, DataError> {
        let len = values.len();
        Self::new(dims, values, vec![true; len])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    #[inline]
    pub fn in_mask(&self, x: usize, y: usize, z: usize) -> bool {
        self.mask[self.index(x, y, z)]
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mean over in-mask voxels, accumulated in double precision.
    pub fn in_mask_mean(&self) -> f64 {
        let (sum, n) = self
            .values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .fold((0.0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
        sum / n as f64
    }
}

/// Ordered metric list per region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricConfig(BTreeMap<Region, Vec<String>>);

impl Default for MetricConfig {
    fn default() -> Self {
        let cc = ["AWF", "DA", "De_par", "FA", "MD", "AK", "MK", "RK"];
        let thal = ["FA", "MD", "AK", "MK", "RK"];
        let mut map = BTreeMap::new();
        map.insert(Region::Cc, cc.iter().map(|s| s.to_string()).collect());
        map.insert(Region::Thalamus, thal.iter().map(|s| s.to_string()).collect());
        MetricConfig(map)
    }
}

impl MetricConfig {
    pub fn new(map: BTreeMap<Region, Vec<String>>) -> Result<Self, DataError> {
        for (region, metrics) in &map {
            if metrics.is_empty() {
                return Err(DataError::Schema(format!("region {region} has no metrics")));
            }
            let unique: HashSet<_> = metrics.iter().collect();
            if unique.len() != metrics.len() {
                return Err(DataError::Schema(format!("region {region} lists a metric twice")));
            }
        }
        if map.is_empty() {
            return Err(DataError::Schema("metric_config is empty".into()));
        }
        Ok(MetricConfig(map))
    }

    pub fn regions(&self) -> impl Iterator<Item = Region> + '_ {
        self.0.keys().copied()
    }

    pub fn metrics(&self, region: Region) -> &[String] {
        self.0.get(&region).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All (region, metric) pairs in feature order.
    pub fn pairs(&self) -> impl Iterator<Item = (Region, &str)> + '_ {
        self.0
            .iter()
            .flat_map(|(r, ms)| ms.iter().map(move |m| (*r, m.as_str())))
    }

    pub fn n_pairs(&self) -> usize {
        self.0.values().map(Vec::len).sum()
    }

    /// Ordered union of metrics over regions, first occurrence wins.
    pub fn union_metrics(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for metrics in self.0.values() {
            for m in metrics {
                if !out.contains(m) {
                    out.push(m.clone());
                }
            }
        }
        out
    }
}

pub const DEMOGRAPHIC_NAMES: [&str; 2] = ["age", "sex"];
pub const CLINICAL_NAMES: [&str; 4] = ["Stroop", "SDMT", "CVLT", "FSS"];

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub label: Label,
    /// Age in years and sex encoded 0/1.
    pub demographics: [f64; 2],
    /// Stroop, SDMT, CVLT and FSS scores.
    pub clinical: [f64; 4],
    pub regions: BTreeMap<Region, BTreeMap<String, MetricVolume>>,
}

impl SubjectRecord {
    pub fn volume(&self, region: Region, metric: &str) -> Option<&MetricVolume> {
        self.regions.get(&region).and_then(|m| m.get(metric))
    }
}

/// Immutable after load or generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<SubjectRecord>,
    pub metric_config: MetricConfig,
}

impl Dataset {
    pub fn new(subjects: Vec<SubjectRecord>, metric_config: MetricConfig) -> Result<Self, DataError> {
        let ds = Self {
            subjects,
            metric_config,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
            for (region, metric) in self.metric_config.pairs() {
                if s.volume(region, metric).is_none() {
                    return Err(DataError::MetricMismatch {
                        subject: s.id.clone(),
                        region: region.name().into(),
                        metric: metric.into(),
                        problem: "is missing",
                    });
                }
            }
            for (region, metrics) in &s.regions {
                for metric in metrics.keys() {
                    if !self.metric_config.metrics(*region).contains(metric) {
                        return Err(DataError::MetricMismatch {
                            subject: s.id.clone(),
                            region: region.name().into(),
                            metric: metric.clone(),
                            problem: "is not in metric_config",
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// (positives, negatives).
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.subjects.iter().filter(|s| s.label.is_positive()).count();
        (pos, self.subjects.len() - pos)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_has_thirteen_pairs() {
        let cfg = MetricConfig::default();
        assert_eq!(cfg.n_pairs(), 13);
        let first: Vec<_> = cfg.pairs().take(2).collect();
        assert_eq!(first, vec![(Region::Cc, "AWF"), (Region::Cc, "DA")]);
        assert_eq!(cfg.pairs().last(), Some((Region::Thalamus, "RK")));
        assert_eq!(cfg.union_metrics().len(), 8);
    }

    #[test]
    fn volume_rejects_bad_shapes() {
        assert!(MetricVolume::unmasked([2, 2, 1], vec![0.0; 3]).is_err());
        assert!(MetricVolume::new([2, 1, 1], vec![0.0; 2], vec![false; 2]).is_err());
        assert!(MetricVolume::unmasked([2, 1, 1], vec![0.0, f32::NAN]).is_err());
        let v = MetricVolume::new([2, 1, 1], vec![1.0, 3.0], vec![true, false]).unwrap();
        assert_eq!(v.in_mask_mean(), 1.0);
    }

    #[test]
    fn label_serializes_as_bit() {
        assert_eq!(serde_json::to_string(&Label::Patient).unwrap(), "1");
        let l: Label = serde_json::from_str("0").unwrap();
        assert_eq!(l, Label::Control);
        assert!(serde_json::from_str::<Label>("2").is_err());
    }
}
