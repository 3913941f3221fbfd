//! JSON dataset manifests. Volume paths are resolved relative to the
//! manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    companion_mask_path, read_volume_with_mask, write_mask, write_volume, DataError, Dataset, Label, MetricConfig,
    Region, SubjectRecord,
};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    metric_config: BTreeMap<String, Vec<String>>,
    subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSubject {
    id: String,
    label: u8,
    demographics: Vec<f64>,
    clinical: Vec<f64>,
    regions: BTreeMap<String, BTreeMap<String, VolumeRef>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeRef {
    volume: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<PathBuf>,
}

fn parse_region(name: &str) -> Result<Region, DataError> {
    match name {
        "cc" => Ok(Region::Cc),
        "thalamus" => Ok(Region::Thalamus),
        other => Err(DataError::Schema(format!(
            "unknown region `{other}` (expected cc or thalamus)"
        ))),
    }
}

fn to_array<const N: usize>(values: &[f64], what: &str, id: &str) -> Result<[f64; N], DataError> {
    let arr: [f64; N] = values.try_into().map_err(|_| {
        DataError::Schema(format!(
            "subject {id}: {what} needs exactly {N} values, got {}",
            values.len()
        ))
    })?;
    if arr.iter().any(|v| !v.is_finite()) {
        return Err(DataError::Schema(format!("subject {id}: non-finite {what} value")));
    }
    Ok(arr)
}

/// Loads and validates a dataset manifest and every volume it references.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DataError::Schema(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut config = BTreeMap::new();
    for (name, metrics) in manifest.metric_config {
        config.insert(parse_region(&name)?, metrics);
    }
    let metric_config = MetricConfig::new(config)?;

    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for ms in manifest.subjects {
        let label = Label::from_bit(ms.label)
            .ok_or_else(|| DataError::Schema(format!("subject {}: label must be 0 or 1", ms.id)))?;
        let demographics = to_array::<2>(&ms.demographics, "demographics", &ms.id)?;
        let clinical = to_array::<4>(&ms.clinical, "clinical", &ms.id)?;
        let mut regions = BTreeMap::new();
        for (rname, metrics) in ms.regions {
            let region = parse_region(&rname)?;
            let mut vols = BTreeMap::new();
            for (metric, vref) in metrics {
                let vpath = base.join(&vref.volume);
                let mpath = vref.mask.as_ref().map(|m| base.join(m));
                let volume = read_volume_with_mask(&vpath, mpath.as_deref())?;
                vols.insert(metric, volume);
            }
            regions.insert(region, vols);
        }
        subjects.push(SubjectRecord {
            id: ms.id,
            label,
            demographics,
            clinical,
            regions,
        });
    }
    let ds = Dataset::new(subjects, metric_config)?;
    let (pos, neg) = ds.class_counts();
    log::info!(
        "loaded {} subjects ({pos} positive, {neg} negative) from {}",
        ds.len(),
        manifest_path.display()
    );
    Ok(ds)
}

/// Writes every volume and mask as DBV1 files under `dir/volumes/<id>/` and
/// the manifest as `dir/manifest.json`. Returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf, DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut subjects = Vec::with_capacity(dataset.subjects.len());
    for s in &dataset.subjects {
        let rel_dir = PathBuf::from("volumes").join(&s.id);
        fs::create_dir_all(dir.join(&rel_dir))?;
        let mut regions = BTreeMap::new();
        for (region, metrics) in &s.regions {
            let mut refs = BTreeMap::new();
            for (metric, volume) in metrics {
                let rel = rel_dir.join(format!("{}_{}.dbv", region.name(), metric));
                let rel_mask = companion_mask_path(&rel);
                write_volume(volume, dir.join(&rel))?;
                write_mask(volume, dir.join(&rel_mask))?;
                refs.insert(
                    metric.clone(),
                    VolumeRef {
                        volume: rel,
                        mask: Some(rel_mask),
                    },
                );
            }
            regions.insert(region.name().to_string(), refs);
        }
        subjects.push(ManifestSubject {
            id: s.id.clone(),
            label: s.label.bit(),
            demographics: s.demographics.to_vec(),
            clinical: s.clinical.to_vec(),
            regions,
        });
    }
    let metric_config = dataset
        .metric_config
        .regions()
        .map(|r| (r.name().to_string(), dataset.metric_config.metrics(r).to_vec()))
        .collect();
    let manifest = Manifest {
        metric_config,
        subjects,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Schema(e.to_string()))?;
    fs::write(&path, text + "\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::MetricVolume;

    fn tiny_subject(id: &str, label: Label, config: &MetricConfig) -> SubjectRecord {
        let mut regions = BTreeMap::new();
        for region in config.regions() {
            let mut vols = BTreeMap::new();
            for m in config.metrics(region) {
                let v = MetricVolume::unmasked([4, 4, 1], (0..16).map(|x| x as f32 * 0.5).collect()).unwrap();
                vols.insert(m.clone(), v);
            }
            regions.insert(region, vols);
        }
        SubjectRecord {
            id: id.into(),
            label,
            demographics: [30.0, 1.0],
            clinical: [1.0, 2.0, 3.0, 4.0],
            regions,
        }
    }

    #[test]
    fn two_subject_round_trip() {
        let cfg = MetricConfig::default();
        let ds = Dataset::new(
            vec![
                tiny_subject("a", Label::Patient, &cfg),
                tiny_subject("b", Label::Control, &cfg),
            ],
            cfg,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.metric_config.n_pairs(), 13);
        assert_eq!(loaded, ds);
    }

    #[test]
    fn missing_metric_is_reported() {
        let cfg = MetricConfig::default();
        let mut s = tiny_subject("a", Label::Patient, &cfg);
        s.regions.get_mut(&Region::Thalamus).unwrap().remove("FA");
        let ds = Dataset {
            subjects: vec![s],
            metric_config: cfg,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(&ds, dir.path()).unwrap();
        match load_dataset(&path) {
            Err(DataError::MetricMismatch { region, metric, .. }) => {
                assert_eq!(region, "thalamus");
                assert_eq!(metric, "FA");
            }
            other => panic!("expected MetricMismatch, got {other:?}"),
        }
    }

    #[test]
    fn schema_and_missing_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(&p, r#"{"metric_config": {"cc": ["FA"]}, "subjects": [{"id": "a", "label": 1, "demographics": [1.0], "clinical": [1,2,3,4], "regions": {}}]}"#).unwrap();
        assert!(matches!(load_dataset(&p), Err(DataError::Schema(_))));

        fs::write(&p, r#"{"metric_config": {"cc": ["FA"]}, "subjects": [{"id": "a", "label": 1, "demographics": [1.0, 0.0], "clinical": [1,2,3,4], "regions": {"cc": {"FA": {"volume": "nope.dbv"}}}}]}"#).unwrap();
        assert!(matches!(load_dataset(&p), Err(DataError::MissingVolume { .. })));

        fs::write(&p, r#"{"metric_config": {"brain": ["FA"]}, "subjects": []}"#).unwrap();
        assert!(matches!(load_dataset(&p), Err(DataError::Schema(_))));
    }
}
