//! Mean-matched synthetic phantoms.
//!
//! Every volume is a smooth correlated noise field centred on a per-metric
//! base level. Patients additionally receive a fine grating along x with
//! random phase inside a contiguous x-slab covering `lesion_fraction` of
//! each region, for the metrics in `perturbed_metrics`. Each volume is then
//! shifted so
//! its in-mask mean equals the control-population in-mask mean, leaving
//! texture as the only imaging difference between the classes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Label, MetricConfig, MetricVolume, Region, SubjectRecord};
use crate::seed::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub n_subjects: usize,
    pub n_patients: usize,
    pub cc_dims: [usize; 3],
    pub thalamus_dims: [usize; 3],
    /// Fraction of each region's x-extent covered by the lesion slab.
    pub lesion_fraction: f64,
    /// Lesion texture standard deviation in units of the metric's field
    /// scale.
    pub effect_size: f64,
    /// Wavelength of the lesion texture, in voxels.
    pub texture_period: f64,
    pub perturbed_metrics: Vec<String>,
    /// Gaussian smoothing width (voxels) of the background field.
    pub smoothing_sigma: f64,
    /// Class separation of the clinical scores, in standard deviations.
    pub clinical_gap: f64,
    pub metric_config: MetricConfig,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_subjects: 114,
            n_patients: 70,
            cc_dims: [32, 24, 2],
            thalamus_dims: [24, 24, 2],
            lesion_fraction: 0.8,
            effect_size: 0.6,
            texture_period: 4.0,
            perturbed_metrics: ["AWF", "DA", "FA", "MK", "RK"].iter().map(|s| s.to_string()).collect(),
            smoothing_sigma: 1.5,
            clinical_gap: 0.0,
            metric_config: MetricConfig::default(),
            seed: 7,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::InvalidSpec(msg));
        if self.n_subjects == 0 {
            return fail("n_subjects must be positive".into());
        }
        if self.n_patients > self.n_subjects {
            return fail(format!(
                "n_patients ({}) exceeds n_subjects ({})",
                self.n_patients, self.n_subjects
            ));
        }
        for dims in [self.cc_dims, self.thalamus_dims] {
            if dims.contains(&0) {
                return fail(format!("dimensions must be positive, got {dims:?}"));
            }
        }
        if !(self.lesion_fraction > 0.0 && self.lesion_fraction <= 1.0) {
            return fail(format!("lesion_fraction must lie in (0, 1], got {}", self.lesion_fraction));
        }
        if !(self.effect_size.is_finite() && self.effect_size >= 0.0) {
            return fail(format!("effect_size must be finite and >= 0, got {}", self.effect_size));
        }
        if !(self.texture_period.is_finite() && self.texture_period >= 2.0) {
            return fail(format!("texture_period must be >= 2, got {}", self.texture_period));
        }
        if !(self.smoothing_sigma.is_finite() && self.smoothing_sigma >= 0.0) {
            return fail("smoothing_sigma must be finite and >= 0".into());
        }
        if !self.clinical_gap.is_finite() {
            return fail("clinical_gap must be finite".into());
        }
        let known = self.metric_config.union_metrics();
        if let Some(m) = self.perturbed_metrics.iter().find(|m| !known.contains(m)) {
            return fail(format!("perturbed metric {m} is not configured"));
        }
        Ok(())
    }

    pub fn dims(&self, region: Region) -> [usize; 3] {
        match region {
            Region::Cc => self.cc_dims,
            Region::Thalamus => self.thalamus_dims,
        }
    }
}

/// Base level and field scale, in scan-native units, for a metric.
pub fn metric_profile(metric: &str) -> (f64, f64) {
    match metric {
        "AWF" => (0.45, 0.05),
        "DA" => (1.2, 0.1),
        "De_par" => (1.8, 0.15),
        "De_perp" => (0.8, 0.1),
        "FA" => (0.45, 0.08),
        "MD" => (0.85, 0.07),
        "AK" => (0.9, 0.1),
        "MK" => (1.0, 0.1),
        "RK" => (1.1, 0.12),
        _ => (1.0, 0.1),
    }
}

const CLINICAL_PROFILE: [(f64, f64); 4] = [(45.0, 10.0), (55.0, 10.0), (50.0, 10.0), (30.0, 10.0)];

/// Elliptical region in every axial slice, slightly larger than the grid so
/// the corners fall outside.
fn region_mask(dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let (cx, cy) = (nx as f64 / 2.0, ny as f64 / 2.0);
    let (ax, ay) = (0.6 * nx as f64, 0.6 * ny as f64);
    let mut mask = Vec::with_capacity(nx * ny * nz);
    for _z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let dx = (x as f64 + 0.5 - cx) / ax;
                let dy = (y as f64 + 0.5 - cy) / ay;
                mask.push(dx * dx + dy * dy <= 1.0);
            }
        }
    }
    mask
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable in-plane blur with clamped borders.
fn blur_slices(field: &mut [f64], dims: [usize; 3], kernel: &[f64]) {
    let [nx, ny, nz] = dims;
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; nx * ny];
    for z in 0..nz {
        let slice = &mut field[z * nx * ny..(z + 1) * nx * ny];
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for (j, w) in kernel.iter().enumerate() {
                    let xx = (x as isize + j as isize - r).clamp(0, nx as isize - 1) as usize;
                    acc += w * slice[y * nx + xx];
                }
                tmp[y * nx + x] = acc;
            }
        }
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for (j, w) in kernel.iter().enumerate() {
                    let yy = (y as isize + j as isize - r).clamp(0, ny as isize - 1) as usize;
                    acc += w * tmp[yy * nx + x];
                }
                slice[y * nx + x] = acc;
            }
        }
    }
}

/// Zero in-mask mean, unit in-mask standard deviation.
fn standardize_in_mask(field: &mut [f64], mask: &[bool]) {
    let n = mask.iter().filter(|&&m| m).count() as f64;
    let mean = field.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() / n;
    let var = field
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| (v - mean).powi(2))
        .sum::<f64>()
        / n;
    let sd = var.sqrt().max(1e-12);
    field.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

fn shift_to_mean(volume: &MetricVolume, target: f64) -> Result<MetricVolume, DataError> {
    let mut current = volume.clone();
    // A second pass absorbs most of the f32 rounding from the first.
    for _ in 0..2 {
        let delta = target - current.in_mask_mean();
        let values = current.values().iter().map(|&v| (v as f64 + delta) as f32).collect();
        current = MetricVolume::new(current.dims(), values, current.mask().to_vec())?;
    }
    Ok(current)
}

/// Generates a mean-matched phantom dataset. Deterministic given the spec.
pub fn generate_phantom_dataset(spec: &PhantomSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let config = &spec.metric_config;

    let mut labels: Vec<Label> = (0..spec.n_subjects)
        .map(|i| if i < spec.n_patients { Label::Patient } else { Label::Control })
        .collect();
    labels.shuffle(&mut seed::rng(seed::derive(spec.seed, stream::PHANTOM_LABELS, 0)));

    let kernel = gaussian_kernel(spec.smoothing_sigma);
    let masks: BTreeMap<Region, Vec<bool>> = config.regions().map(|r| (r, region_mask(spec.dims(r)))).collect();

    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(spec.seed, stream::PHANTOM_SUBJECT, i as u64));
        let age = rng.gen_range(18.0..=64.0);
        let sex = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        let mut clinical = [0.0; 4];
        for (c, (mu, sd)) in clinical.iter_mut().zip(CLINICAL_PROFILE) {
            let z: f64 = rng.sample(StandardNormal);
            let shift = if label.is_positive() { spec.clinical_gap * sd } else { 0.0 };
            *c = mu + shift + sd * z;
        }

        let mut regions = BTreeMap::new();
        for region in config.regions() {
            let dims = spec.dims(region);
            let [nx, ny, nz] = dims;
            let mask = &masks[&region];
            let width = ((spec.lesion_fraction * nx as f64).round() as usize).clamp(1, nx);
            let offset = rng.gen_range(0..=nx - width);
            let mut vols = BTreeMap::new();
            for metric in config.metrics(region) {
                let (base, scale) = metric_profile(metric);
                let n = nx * ny * nz;
                let mut field: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                // Phases are drawn for every subject so both classes consume
                // the same random stream.
                let phases: Vec<f64> = (0..nz).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
                let freq = std::f64::consts::TAU / spec.texture_period;
                let texture = |x: usize, z: usize| std::f64::consts::SQRT_2 * (freq * x as f64 + phases[z]).cos();
                blur_slices(&mut field, dims, &kernel);
                standardize_in_mask(&mut field, mask);
                let perturb = label.is_positive() && spec.perturbed_metrics.iter().any(|m| m == metric);
                let mut values = Vec::with_capacity(n);
                for z in 0..nz {
                    for y in 0..ny {
                        for x in 0..nx {
                            let idx = x + nx * (y + ny * z);
                            let mut v = field[idx];
                            if perturb && mask[idx] && (offset..offset + width).contains(&x) {
                                v += spec.effect_size * texture(x, z);
                            }
                            values.push((base + scale * v) as f32);
                        }
                    }
                }
                vols.insert(metric.clone(), MetricVolume::new(dims, values, mask.clone())?);
            }
            regions.insert(region, vols);
        }
        subjects.push(SubjectRecord {
            id: format!("S{i:03}"),
            label,
            demographics: [age, sex],
            clinical,
            regions,
        });
    }

    for (region, metric) in config.pairs() {
        let control_means: Vec<f64> = subjects
            .iter()
            .filter(|s| !s.label.is_positive())
            .map(|s| s.volume(region, metric).unwrap().in_mask_mean())
            .collect();
        let target = if control_means.is_empty() {
            metric_profile(metric).0
        } else {
            control_means.iter().sum::<f64>() / control_means.len() as f64
        };
        // Controls take the same shift so both classes share one rounding
        // path; their means already sit at the target.
        for s in subjects.iter_mut() {
            let vol = s.regions.get_mut(&region).unwrap().get_mut(metric).unwrap();
            *vol = shift_to_mean(vol, target)?;
        }
    }

    Dataset::new(subjects, config.clone())
}
