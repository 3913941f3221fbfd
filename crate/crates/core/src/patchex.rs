//! Overlapping 2D patch extraction from masked region volumes.
//!
//! Patches are axial (fixed z) windows; values are stored row-major with
//! channels interleaved, i.e. index `(y * size + x) * channels + c`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{MetricVolume, Region};

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("invalid patch geometry: {0}")]
    InvalidGeometry(String),
    #[error("no window reaches the coverage threshold")]
    EmptyResult,
    #[error("patch sets are not aligned: {0}")]
    OriginMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel {channel} is degenerate (std {std:e})")]
    DegenerateChannel { channel: usize, std: f64 },
    #[error("patch set is empty")]
    EmptySet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchGeometry {
    pub size: usize,
    pub stride: usize,
    /// Minimum in-mask fraction for a window to become a patch.
    pub coverage_min: f64,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self {
            size: 16,
            stride: 4,
            coverage_min: 0.5,
        }
    }
}

impl PatchGeometry {
    pub fn validate(&self) -> Result<(), PatchError> {
        if self.size < 2 {
            return Err(PatchError::InvalidGeometry(format!("size {} < 2", self.size)));
        }
        if self.stride == 0 {
            return Err(PatchError::InvalidGeometry("stride must be >= 1".into()));
        }
        if !(self.coverage_min > 0.0 && self.coverage_min <= 1.0) {
            return Err(PatchError::InvalidGeometry(format!(
                "coverage_min {} outside (0, 1]",
                self.coverage_min
            )));
        }
        Ok(())
    }
}

/// Where a patch came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSource {
    pub subject: Arc<str>,
    pub region: Region,
    pub group: Arc<str>,
}

impl PatchSource {
    pub fn new(subject: &str, region: Region, group: &str) -> Self {
        Self {
            subject: subject.into(),
            region,
            group: group.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub values: Vec<f64>,
    pub source: PatchSource,
}

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Homogeneous batch of patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    size: usize,
    channels: usize,
    patches: Vec<Patch>,
    norm_stats: Option<NormStats>,
}

impl PatchSet {
    pub fn new(size: usize, channels: usize, patches: Vec<Patch>) -> Result<Self, PatchError> {
        let len = size * size * channels;
        if let Some(p) = patches.iter().find(|p| p.values.len() != len) {
            return Err(PatchError::ShapeMismatch(format!(
                "patch at {:?} has {} values, expected {len}",
                p.origin,
                p.values.len()
            )));
        }
        Ok(Self {
            size,
            channels,
            patches,
            norm_stats: None,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Values per patch.
    pub fn patch_len(&self) -> usize {
        self.size * self.size * self.channels
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn into_patches(self) -> Vec<Patch> {
        self.patches
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm_stats.as_ref()
    }

    pub fn origins(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.patches.iter().map(|p| p.origin)
    }

    /// Concatenates sets of identical shape, in order.
    pub fn concat<'a>(sets: impl IntoIterator<Item = &'a PatchSet>) -> Result<PatchSet, PatchError> {
        let mut iter = sets.into_iter();
        let first = iter.next().ok_or(PatchError::EmptySet)?;
        let mut out = first.clone();
        out.norm_stats = None;
        for s in iter {
            if s.size != out.size || s.channels != out.channels {
                return Err(PatchError::ShapeMismatch(format!(
                    "cannot concatenate {}x{}x{} with {}x{}x{}",
                    out.size, out.size, out.channels, s.size, s.size, s.channels
                )));
            }
            out.patches.extend(s.patches.iter().cloned());
        }
        Ok(out)
    }

    /// Same origins and sources as `template`, all values zero.
    pub fn zeros_like(template: &PatchSet, channels: usize, group: &str) -> PatchSet {
        let len = template.size * template.size * channels;
        let group: Arc<str> = group.into();
        let patches = template
            .patches
            .iter()
            .map(|p| Patch {
                origin: p.origin,
                values: vec![0.0; len],
                source: PatchSource {
                    group: group.clone(),
                    ..p.source.clone()
                },
            })
            .collect();
        PatchSet {
            size: template.size,
            channels,
            patches,
            norm_stats: None,
        }
    }

    /// Copies the patches at `indices` into a new set.
    pub fn select(&self, indices: &[usize]) -> PatchSet {
        PatchSet {
            size: self.size,
            channels: self.channels,
            patches: indices.iter().map(|&i| self.patches[i].clone()).collect(),
            norm_stats: self.norm_stats.clone(),
        }
    }
}

/// Extracts every window on the stride lattice whose in-mask fraction
/// reaches `coverage_min`. Order: z, then y, then x ascending.
pub fn extract_patches(
    volume: &MetricVolume,
    geometry: &PatchGeometry,
    source: PatchSource,
) -> Result<PatchSet, PatchError> {
    geometry.validate()?;
    let [nx, ny, nz] = volume.dims();
    let size = geometry.size;
    if size > nx.min(ny) {
        return Err(PatchError::InvalidGeometry(format!(
            "patch size {size} exceeds in-plane dims {nx}x{ny}"
        )));
    }
    let area = (size * size) as f64;
    let mut patches = Vec::new();
    for z in 0..nz {
        for y0 in (0..=ny - size).step_by(geometry.stride) {
            for x0 in (0..=nx - size).step_by(geometry.stride) {
                let mut inside = 0usize;
                let mut values = Vec::with_capacity(size * size);
                for y in y0..y0 + size {
                    for x in x0..x0 + size {
                        inside += volume.in_mask(x, y, z) as usize;
                        values.push(volume.value(x, y, z) as f64);
                    }
                }
                if inside as f64 / area >= geometry.coverage_min {
                    patches.push(Patch {
                        origin: [x0, y0, z],
                        values,
                        source: source.clone(),
                    });
                }
            }
        }
    }
    if patches.is_empty() {
        return Err(PatchError::EmptyResult);
    }
    PatchSet::new(size, 1, patches)
}

/// Stacks co-registered per-metric sets into one multi-channel set; channel
/// order follows the input order.
pub fn stack_metrics(sets: &[&PatchSet], group: &str) -> Result<PatchSet, PatchError> {
    let first = *sets.first().ok_or(PatchError::EmptySet)?;
    for (i, s) in sets.iter().enumerate().skip(1) {
        if s.size != first.size || s.len() != first.len() {
            return Err(PatchError::OriginMismatch(format!(
                "input {i} has {} patches of size {}, expected {} of size {}",
                s.len(),
                s.size,
                first.len(),
                first.size
            )));
        }
        for (a, b) in first.patches.iter().zip(&s.patches) {
            if a.origin != b.origin || a.source.subject != b.source.subject || a.source.region != b.source.region {
                return Err(PatchError::OriginMismatch(format!(
                    "input {i}: patch at {:?} ({}) vs {:?} ({})",
                    b.origin, b.source.subject, a.origin, a.source.subject
                )));
            }
        }
    }
    let channels: usize = sets.iter().map(|s| s.channels).sum();
    let pixels = first.size * first.size;
    let group: Arc<str> = group.into();
    let patches = (0..first.len())
        .map(|pi| {
            let mut values = Vec::with_capacity(pixels * channels);
            for px in 0..pixels {
                for s in sets {
                    let c = s.channels;
                    values.extend_from_slice(&s.patches[pi].values[px * c..(px + 1) * c]);
                }
            }
            let p = &first.patches[pi];
            Patch {
                origin: p.origin,
                values,
                source: PatchSource {
                    group: group.clone(),
                    ..p.source.clone()
                },
            }
        })
        .collect();
    PatchSet::new(first.size, channels, patches)
}

/// Per-channel mean and population standard deviation over every pixel of
/// every patch.
pub fn fit_norm(train: &PatchSet) -> Result<NormStats, PatchError> {
    if train.is_empty() {
        return Err(PatchError::EmptySet);
    }
    let c = train.channels;
    let mut sum = vec![0.0f64; c];
    let mut count = 0usize;
    for p in &train.patches {
        for px in p.values.chunks_exact(c) {
            for (s, &v) in sum.iter_mut().zip(px) {
                *s += v;
            }
        }
        count += p.values.len() / c;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut ss = vec![0.0f64; c];
    for p in &train.patches {
        for px in p.values.chunks_exact(c) {
            for ((acc, &v), m) in ss.iter_mut().zip(px).zip(&mean) {
                *acc += (v - m).powi(2);
            }
        }
    }
    let std: Vec<f64> = ss.iter().map(|s| (s / count as f64).sqrt()).collect();
    if let Some((channel, &std)) = std.iter().enumerate().find(|(_, &s)| s < 1e-12) {
        return Err(PatchError::DegenerateChannel { channel, std });
    }
    Ok(NormStats { mean, std })
}

/// Z-scores every channel with previously fitted statistics.
pub fn apply_norm(set: &PatchSet, stats: &NormStats) -> Result<PatchSet, PatchError> {
    let c = set.channels;
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(PatchError::ShapeMismatch(format!(
            "stats for {} channels applied to {c}-channel patches",
            stats.mean.len()
        )));
    }
    let patches = set
        .patches
        .iter()
        .map(|p| {
            let mut values = Vec::with_capacity(p.values.len());
            for px in p.values.chunks_exact(c) {
                for ((&v, m), s) in px.iter().zip(&stats.mean).zip(&stats.std) {
                    values.push((v - m) / s);
                }
            }
            Patch {
                origin: p.origin,
                values,
                source: p.source.clone(),
            }
        })
        .collect();
    Ok(PatchSet {
        size: set.size,
        channels: c,
        patches,
        norm_stats: Some(stats.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn src() -> PatchSource {
        PatchSource::new("s0", Region::Cc, "FA")
    }

    fn ramp(nx: usize, ny: usize, nz: usize) -> MetricVolume {
        MetricVolume::unmasked([nx, ny, nz], (0..nx * ny * nz).map(|v| v as f32).collect()).unwrap()
    }

    fn geom(size: usize, stride: usize) -> PatchGeometry {
        PatchGeometry {
            size,
            stride,
            coverage_min: 0.5,
        }
    }

    #[test]
    fn lattice_counts() {
        assert_eq!(extract_patches(&ramp(16, 16, 1), &geom(16, 4), src()).unwrap().len(), 1);
        assert_eq!(extract_patches(&ramp(32, 32, 1), &geom(16, 16), src()).unwrap().len(), 4);
        assert_eq!(extract_patches(&ramp(32, 32, 1), &geom(16, 4), src()).unwrap().len(), 25);
    }

    #[test]
    fn patch_values_and_order() {
        let set = extract_patches(&ramp(4, 4, 2), &geom(2, 2), src()).unwrap();
        let origins: Vec<_> = set.origins().collect();
        assert_eq!(origins[0], [0, 0, 0]);
        assert_eq!(origins[1], [2, 0, 0]);
        assert_eq!(origins[2], [0, 2, 0]);
        assert_eq!(origins[4], [0, 0, 1]);
        assert_eq!(set.patches()[1].values, vec![2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn geometry_errors() {
        assert!(matches!(
            extract_patches(&ramp(8, 8, 1), &geom(16, 4), src()),
            Err(PatchError::InvalidGeometry(_))
        ));
        assert!(matches!(
            extract_patches(&ramp(8, 8, 1), &geom(4, 0), src()),
            Err(PatchError::InvalidGeometry(_))
        ));
        let mut mask = vec![false; 64];
        mask[0] = true;
        let v = MetricVolume::new([8, 8, 1], vec![1.0; 64], mask).unwrap();
        assert_eq!(extract_patches(&v, &geom(4, 4), src()), Err(PatchError::EmptyResult));
    }

    #[test]
    fn stacking() {
        let a = extract_patches(&ramp(32, 32, 1), &geom(16, 4), src()).unwrap();
        let sets: Vec<PatchSet> = (0..8).map(|_| a.clone()).collect();
        let refs: Vec<&PatchSet> = sets.iter().collect();
        let s = stack_metrics(&refs, "stacked").unwrap();
        assert_eq!(s.len(), 25);
        assert_eq!(s.channels(), 8);
        assert_eq!(s.patches()[3].values[..8], [a.patches()[3].values[0]; 8]);

        let single = stack_metrics(&[&a], "FA").unwrap();
        assert_eq!(single.patches()[0].values, a.patches()[0].values);
        assert_eq!(single.channels(), 1);

        let b = extract_patches(&ramp(32, 32, 1), &geom(16, 16), src()).unwrap();
        assert!(matches!(stack_metrics(&[&a, &b], "x"), Err(PatchError::OriginMismatch(_))));
        let mut c = a.clone();
        c.patches[2].origin = [1, 1, 0];
        assert!(matches!(stack_metrics(&[&a, &c], "x"), Err(PatchError::OriginMismatch(_))));
    }

    #[test]
    fn normalization() {
        let v = MetricVolume::unmasked([32, 32, 1], vec![3.0; 1024]).unwrap();
        let constant = extract_patches(&v, &geom(16, 8), src()).unwrap();
        assert!(matches!(fit_norm(&constant), Err(PatchError::DegenerateChannel { channel: 0, .. })));

        let set = extract_patches(&ramp(32, 32, 1), &geom(16, 4), src()).unwrap();
        let stats = fit_norm(&set).unwrap();
        let normed = apply_norm(&set, &stats).unwrap();
        let again = fit_norm(&normed).unwrap();
        assert!(again.mean[0].abs() < 1e-10);
        assert!((again.std[0] - 1.0).abs() < 1e-10);

        // Shifting the input by delta shifts the normalized output by delta / std.
        let shifted = MetricVolume::unmasked([32, 32, 1], (0..1024).map(|v| v as f32 + 10.0).collect()).unwrap();
        let sset = extract_patches(&shifted, &geom(16, 4), src()).unwrap();
        let snormed = apply_norm(&sset, &stats).unwrap();
        let expected = 10.0 / stats.std[0];
        for (a, b) in snormed.patches().iter().zip(normed.patches()) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!(((x - y) - expected).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn full_mask_count_formula(nx in 4usize..40, ny in 4usize..40, nz in 1usize..3, size in 2usize..5, stride in 1usize..6) {
            let v = MetricVolume::unmasked([nx, ny, nz], vec![0.0; nx * ny * nz]).unwrap();
            let set = extract_patches(&v, &geom(size, stride), src()).unwrap();
            let expected = ((nx - size) / stride + 1) * ((ny - size) / stride + 1) * nz;
            prop_assert_eq!(set.len(), expected);
        }

        #[test]
        fn coverage_is_monotone(seed in any::<u64>(), lo in 0.05f64..0.5, hi in 0.5f64..1.0) {
            use rand::Rng;
            let mut rng = crate::seed::rng(seed);
            let mut mask: Vec<bool> = (0..400).map(|_| rng.gen_bool(0.6)).collect();
            mask[0] = true;
            let v = MetricVolume::new([20, 20, 1], vec![0.0; 400], mask).unwrap();
            let count = |c: f64| match extract_patches(&v, &PatchGeometry { size: 4, stride: 2, coverage_min: c }, src()) {
                Ok(s) => s.len(),
                Err(PatchError::EmptyResult) => 0,
                Err(e) => panic!("{e}"),
            };
            prop_assert!(count(hi) <= count(lo));
        }
    }
}
