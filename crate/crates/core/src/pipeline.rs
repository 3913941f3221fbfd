//! Run configuration and the three feature families (deep BoW, raw-patch
//! BoW, region means) behind the evaluation protocols.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{debug, info};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cae::{self, AutoEncoder, Batch, CaeArch, TrainConfig};
use crate::dataio::{self, Dataset, Label, PhantomSpec, Region};
use crate::eval::{
    self, ClassifierConfig, CvReport, EvalConfig, FitContext, FitLog, Featurizer, HeldoutReport,
};
use crate::features::{self, FeatureMatrix, FeatureVector, Scenario, STACKED_GROUP};
use crate::learn::{SelectionConfig, SmoConfig, SvmGrid};
use crate::patchex::{self, NormStats, PatchGeometry, PatchSet, PatchSource};
use crate::seed::{self, stream};
use crate::vocab::{self, BowHistogram, Codebook, FeatureKind, KmeansConfig, Scope};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    #[default]
    DeepBow,
    RawBow,
    RegionMean,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::DeepBow => "deep-bow",
            Family::RawBow => "raw-bow",
            Family::RegionMean => "region-mean",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "deep-bow" => Ok(Family::DeepBow),
            "raw-bow" => Ok(Family::RawBow),
            "region-mean" => Ok(Family::RegionMean),
            other => Err(format!("unknown family `{other}` (deep-bow | raw-bow | region-mean)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[default]
    Cv,
    Heldout,
    Both,
}

/// Auto-encoder training settings; the latent size follows the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaeSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Train on a seeded random subset of at most this many patches.
    pub max_patches: Option<usize>,
}

impl Default for CaeSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            max_patches: None,
        }
    }
}

impl CaeSettings {
    fn train_config(&self, shuffle_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            shuffle_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Manifest path; when absent the phantom spec is generated in memory.
    pub dataset: Option<PathBuf>,
    pub phantom: PhantomSpec,
    pub out_dir: PathBuf,
    pub family: Family,
    pub scenario: Scenario,
    pub patch: PatchGeometry,
    pub cae: CaeSettings,
    pub vocab: KmeansConfig,
    pub selection: SelectionConfig,
    pub svm: SvmGrid,
    pub smo: SmoConfig,
    pub eval: EvalConfig,
    pub protocol: Protocol,
    /// Escalate SVM iteration-cap hits to errors.
    pub strict: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            phantom: PhantomSpec::default(),
            out_dir: PathBuf::from("out"),
            family: Family::default(),
            scenario: Scenario::default(),
            patch: PatchGeometry::default(),
            cae: CaeSettings::default(),
            vocab: KmeansConfig::default(),
            selection: SelectionConfig::default(),
            svm: SvmGrid::default(),
            smo: SmoConfig::default(),
            eval: EvalConfig::default(),
            protocol: Protocol::default(),
            strict: false,
            seed: 7,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))
    }

    /// Checks every section before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.patch.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.cae.epochs > 0 {
            self.cae
                .train_config(0)
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.cae.max_patches == Some(0) {
            return cfg("cae.max_patches must be positive".into());
        }
        if self.vocab.k < 1 || self.vocab.max_iters == 0 || !(self.vocab.tol >= 0.0) {
            return cfg("vocab needs k >= 1, max_iters >= 1 and tol >= 0".into());
        }
        if self.selection.budget == 0 || self.selection.inner_folds < 2 {
            return cfg("selection needs budget >= 1 and inner_folds >= 2".into());
        }
        if self.svm.folds < 2 {
            return cfg("svm.folds must be at least 2".into());
        }
        if !(self.smo.tol > 0.0) || self.smo.max_passes == 0 {
            return cfg("smo needs tol > 0 and max_passes >= 1".into());
        }
        self.eval.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.dataset.is_none() {
            self.phantom.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            selection: self.selection.clone(),
            grid: self.svm.clone(),
            smo: self.smo,
            strict: self.strict,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.dataset {
            Some(path) => dataio::load_dataset(path)?,
            None => dataio::generate_phantom_dataset(&self.phantom)?,
        };
        Ok(ds)
    }
}

/// Auto-encoder input groups: one per metric, or the stacked group.
pub fn groups(dataset: &Dataset, scenario: Scenario) -> Vec<String> {
    match scenario {
        Scenario::PerMetric => dataset.metric_config.union_metrics(),
        Scenario::Stacked => vec![STACKED_GROUP.to_string()],
    }
}

/// Raw single-channel patches of every subject, keyed by (region, metric).
pub struct PatchBank {
    per_subject: Vec<BTreeMap<(Region, String), PatchSet>>,
}

impl PatchBank {
    pub fn build(dataset: &Dataset, geometry: &PatchGeometry) -> Result<Self> {
        let per_subject = dataset
            .subjects
            .par_iter()
            .map(|s| -> Result<_> {
                let mut m = BTreeMap::new();
                for (region, metric) in dataset.metric_config.pairs() {
                    let vol = s.volume(region, metric).expect("validated dataset");
                    let set = patchex::extract_patches(vol, geometry, PatchSource::new(&s.id, region, metric))
                        .map_err(|e| Error::from(e).in_stage("extract"))?;
                    m.insert((region, metric.to_string()), set);
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { per_subject })
    }

    pub fn get(&self, subject: usize, region: Region, metric: &str) -> &PatchSet {
        &self.per_subject[subject][&(region, metric.to_string())]
    }

    pub fn write_counts_csv(&self, ids: &[String], path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["subject", "region", "metric", "patches"])?;
        for (i, region, metric, n) in self.counts() {
            w.write_record([ids[i].as_str(), region.name(), &metric, &n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `(subject, region, metric, patch count)` rows.
    pub fn counts(&self) -> Vec<(usize, Region, String, usize)> {
        self.per_subject
            .iter()
            .enumerate()
            .flat_map(|(i, m)| m.iter().map(move |((r, metric), set)| (i, *r, metric.clone(), set.len())))
            .collect()
    }
}

/// Everything fitted for one training side.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub norm: BTreeMap<String, NormStats>,
    pub models: BTreeMap<String, AutoEncoder<f32>>,
    pub codebooks: Vec<Codebook>,
}

impl Artifacts {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("cae"))?;
        fs::create_dir_all(dir.join("codebooks"))?;
        fs::write(dir.join("norm.json"), serde_json::to_string_pretty(&self.norm)?)?;
        for (g, m) in &self.models {
            m.save(dir.join("cae").join(format!("{g}.json")))?;
        }
        for cb in &self.codebooks {
            let name = format!("{}_{}.json", cb.scope.region.short_name(), cb.scope.group);
            cb.save(dir.join("codebooks").join(name))?;
        }
        Ok(())
    }

    /// Loads whatever is present under `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut a = Artifacts::default();
        let norm = dir.join("norm.json");
        if norm.exists() {
            a.norm = serde_json::from_str(&fs::read_to_string(norm)?)?;
        }
        for (sub, is_model) in [("cae", true), ("codebooks", false)] {
            let d = dir.join(sub);
            if !d.is_dir() {
                continue;
            }
            let mut paths: Vec<PathBuf> = fs::read_dir(&d)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            for p in paths.into_iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
                if is_model {
                    let g = p.file_stem().unwrap_or_default().to_string_lossy().to_string();
                    a.models.insert(g, AutoEncoder::load(&p)?);
                } else {
                    a.codebooks.push(Codebook::load(&p)?);
                }
            }
        }
        Ok(a)
    }
}

/// A dataset plus everything needed to featurize it under one family.
pub struct PipelineFeaturizer<'a> {
    dataset: &'a Dataset,
    config: &'a PipelineConfig,
    bank: Option<PatchBank>,
    ids: Vec<String>,
    labels: Vec<Label>,
    region_means: Option<FeatureMatrix>,
    shared: Mutex<Option<Arc<BTreeMap<String, AutoEncoder<f32>>>>>,
}

impl<'a> PipelineFeaturizer<'a> {
    pub fn new(dataset: &'a Dataset, config: &'a PipelineConfig) -> Result<Self> {
        let ids = dataset.ids();
        let labels = dataset.labels();
        let (bank, region_means) = match config.family {
            Family::RegionMean => {
                let rows = dataset
                    .subjects
                    .iter()
                    .map(|s| features::region_mean_features(s, &dataset.metric_config))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                (None, Some(FeatureMatrix::from_vectors(ids.clone(), labels.clone(), rows)?))
            }
            _ => (Some(PatchBank::build(dataset, &config.patch)?), None),
        };
        Ok(Self {
            dataset,
            config,
            bank,
            ids,
            labels,
            region_means,
            shared: Mutex::new(None),
        })
    }

    pub fn bank(&self) -> Option<&PatchBank> {
        self.bank.as_ref()
    }

    fn bank_ref(&self) -> &PatchBank {
        self.bank.as_ref().expect("patch families build a bank")
    }

    fn subject_ids(&self, rows: &[usize]) -> Vec<String> {
        rows.iter().map(|&i| self.ids[i].clone()).collect()
    }

    /// Per-metric normalization statistics over all regions of `rows`.
    pub fn fit_norm(&self, rows: &[usize], context: FitContext, log: &FitLog) -> Result<BTreeMap<String, NormStats>> {
        let bank = self.bank_ref();
        let cfg = &self.dataset.metric_config;
        let mut out = BTreeMap::new();
        for metric in cfg.union_metrics() {
            let regions: Vec<Region> = cfg.regions().filter(|&r| cfg.metrics(r).contains(&metric)).collect();
            let mut sets: Vec<&PatchSet> = Vec::new();
            for &i in rows {
                sets.extend(regions.iter().map(|&r| bank.get(i, r, &metric)));
            }
            let all = PatchSet::concat(sets.iter().copied())?;
            let stats = patchex::fit_norm(&all).map_err(|e| Error::from(e).in_stage("normalize"))?;
            log.record(context, format!("norm/{metric}"), self.subject_ids(rows));
            out.insert(metric, stats);
        }
        Ok(out)
    }

    /// Normalized patches of one subject for one codebook scope.
    fn scope_patches(&self, subject: usize, scope: &Scope, norm: &BTreeMap<String, NormStats>) -> Result<PatchSet> {
        let bank = self.bank_ref();
        let cfg = &self.dataset.metric_config;
        if scope.group != STACKED_GROUP {
            let raw = bank.get(subject, scope.region, &scope.group);
            return Ok(patchex::apply_norm(raw, &norm[&scope.group])?);
        }
        let present = cfg.metrics(scope.region);
        let template = bank.get(subject, scope.region, &present[0]);
        let channels: Vec<PatchSet> = cfg
            .union_metrics()
            .iter()
            .map(|m| -> Result<PatchSet> {
                if present.contains(m) {
                    Ok(patchex::apply_norm(bank.get(subject, scope.region, m), &norm[m])?)
                } else {
                    // Missing metrics sit at the normalized channel mean.
                    Ok(PatchSet::zeros_like(template, 1, m))
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&PatchSet> = channels.iter().collect();
        Ok(patchex::stack_metrics(&refs, STACKED_GROUP)?)
    }

    fn scopes(&self) -> Vec<Scope> {
        features::scopes(&self.dataset.metric_config, self.config.scenario)
    }

    /// Auto-encoders per group, trained on normalized patches of `rows`.
    pub fn train_models(
        &self,
        rows: &[usize],
        norm: &BTreeMap<String, NormStats>,
        context: FitContext,
        log: &FitLog,
        seed_value: u64,
    ) -> Result<BTreeMap<String, AutoEncoder<f32>>> {
        let scopes = self.scopes();
        let mut models = BTreeMap::new();
        for (gi, group) in groups(self.dataset, self.config.scenario).into_iter().enumerate() {
            let mut sets = Vec::new();
            for scope in scopes.iter().filter(|s| s.group == group) {
                for &i in rows {
                    sets.push(self.scope_patches(i, scope, norm)?);
                }
            }
            let mut all = PatchSet::concat(sets.iter())?;
            if let Some(cap) = self.config.cae.max_patches {
                if all.len() > cap {
                    let mut idx: Vec<usize> = (0..all.len()).collect();
                    idx.shuffle(&mut seed::rng(seed::derive(seed_value, stream::SUBSAMPLE, gi as u64)));
                    idx.truncate(cap);
                    idx.sort_unstable();
                    all = all.select(&idx);
                }
            }
            let arch = match self.config.scenario {
                Scenario::PerMetric => CaeArch::per_metric(),
                Scenario::Stacked => CaeArch::stacked(all.channels()),
            };
            let init = AutoEncoder::<f32>::init(arch, seed::derive(seed_value, stream::CAE_INIT, gi as u64))?;
            let t0 = Instant::now();
            let train_cfg = self.config.cae.train_config(seed::derive(seed_value, stream::CAE_SHUFFLE, gi as u64));
            let (model, trace) = cae::train(init, &all, &train_cfg).map_err(|e| Error::from(e).in_stage("train-cae"))?;
            info!(
                "cae {group} ({context}): {} patches, loss {:?} -> {:?}, {:.1}s",
                all.len(),
                trace.first(),
                trace.last(),
                t0.elapsed().as_secs_f64()
            );
            log.record(context, format!("cae/{group}"), self.subject_ids(rows));
            models.insert(group, model);
        }
        Ok(models)
    }

    fn shared_models(&self, log: &FitLog, seed_value: u64) -> Result<Arc<BTreeMap<String, AutoEncoder<f32>>>> {
        let mut guard = self.shared.lock().expect("shared model lock poisoned");
        if let Some(m) = guard.as_ref() {
            return Ok(m.clone());
        }
        let all: Vec<usize> = (0..self.ids.len()).collect();
        let norm = self.fit_norm(&all, FitContext::Shared, log)?;
        let models = Arc::new(self.train_models(&all, &norm, FitContext::Shared, log, seed_value)?);
        *guard = Some(models.clone());
        Ok(models)
    }

    /// Patch descriptors (raw values or latents) per subject for a scope.
    fn descriptors(
        &self,
        subject: usize,
        scope: &Scope,
        norm: &BTreeMap<String, NormStats>,
        models: &BTreeMap<String, AutoEncoder<f32>>,
    ) -> Result<Array2<f64>> {
        let set = self.scope_patches(subject, scope, norm)?;
        match self.config.family {
            Family::RawBow => {
                let flat: Vec<f64> = set.patches().iter().flat_map(|p| p.values.iter().copied()).collect();
                Ok(vocab::to_matrix(&flat, set.patch_len()))
            }
            _ => {
                let model = &models[&scope.group];
                let latents = model.encode_batch(&Batch::from_patch_set(&set))?;
                Ok(vocab::to_matrix(&latents, model.arch().latent_dim()))
            }
        }
    }

    /// Fits normalization, auto-encoders (unless given) and codebooks on
    /// `rows`.
    pub fn fit(
        &self,
        rows: &[usize],
        context: FitContext,
        log: &FitLog,
        seed_value: u64,
        models: Option<BTreeMap<String, AutoEncoder<f32>>>,
    ) -> Result<Artifacts> {
        let norm = self.fit_norm(rows, context, log)?;
        let models = match (self.config.family, models) {
            (Family::RawBow, _) => BTreeMap::new(),
            (_, Some(m)) => m,
            (_, None) => self.train_models(rows, &norm, context, log, seed_value)?,
        };
        let kind = if self.config.family == Family::RawBow {
            FeatureKind::Raw
        } else {
            FeatureKind::Latent
        };
        let codebooks = self
            .scopes()
            .into_par_iter()
            .enumerate()
            .map(|(si, scope)| -> Result<Codebook> {
                let mats: Vec<Array2<f64>> = rows
                    .iter()
                    .map(|&i| self.descriptors(i, &scope, &norm, &models))
                    .collect::<Result<_>>()?;
                let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
                let data = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Config(e.to_string()))?;
                let fit = vocab::kmeans_fit(
                    data.view(),
                    &self.config.vocab,
                    scope.clone(),
                    kind,
                    seed::derive(seed_value, stream::KMEANS, si as u64),
                )
                .map_err(|e| Error::from(e).in_stage("build-vocab"))?;
                debug!(
                    "codebook {scope} ({context}): {} vectors, {} iterations, converged {}",
                    data.nrows(),
                    fit.iterations,
                    fit.converged
                );
                log.record(context, format!("codebook/{scope}"), self.subject_ids(rows));
                Ok(fit.codebook)
            })
            .collect::<Result<_>>()?;
        Ok(Artifacts {
            norm,
            models,
            codebooks,
        })
    }

    /// Feature matrix of every subject under fitted artifacts.
    pub fn transform(&self, artifacts: &Artifacts) -> Result<FeatureMatrix> {
        if let Some(m) = &self.region_means {
            return Ok(m.clone());
        }
        let cfg = &self.dataset.metric_config;
        let rows: Vec<FeatureVector> = (0..self.ids.len())
            .into_par_iter()
            .map(|i| -> Result<FeatureVector> {
                let hists = artifacts
                    .codebooks
                    .iter()
                    .map(|cb| -> Result<BowHistogram> {
                        let desc = self.descriptors(i, &cb.scope, &artifacts.norm, &artifacts.models)?;
                        Ok(vocab::bow_histogram(cb, desc.view())?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(features::assemble_features(&hists, cfg, self.config.scenario, &self.dataset.subjects[i])?)
            })
            .collect::<Result<_>>()?;
        Ok(FeatureMatrix::from_vectors(self.ids.clone(), self.labels.clone(), rows)?)
    }
}

impl Featurizer for PipelineFeaturizer<'_> {
    fn fit_features(&self, train: &[usize], context: FitContext, log: &FitLog, seed_value: u64) -> Result<FeatureMatrix> {
        if self.config.family == Family::RegionMean {
            return self.transform(&Artifacts::default());
        }
        let shared = match (self.config.family, context) {
            (Family::DeepBow, FitContext::CvRepeat(_)) if !self.config.eval.strict_leakage => {
                Some((*self.shared_models(log, self.config.seed)?).clone())
            }
            _ => None,
        };
        let artifacts = self.fit(train, context, log, seed_value, shared)?;
        self.transform(&artifacts)
    }

    fn subjects(&self) -> (&[String], &[Label]) {
        (&self.ids, &self.labels)
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub family: Family,
    pub scenario: Scenario,
    pub words: usize,
    pub n_subjects: usize,
    pub feature_dim: usize,
    pub image_dim: usize,
    pub config: PipelineConfig,
    pub cv: Option<CvReport>,
    pub heldout: Option<HeldoutReport>,
}

impl RunReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Stage timings and seeds, kept apart from the report so reports stay
/// byte-identical across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: PipelineConfig,
    pub master_seed: u64,
    pub stage_seconds: BTreeMap<String, f64>,
    pub fit_records: usize,
    pub leakage_violations: usize,
}

/// Output of [`run`].
pub struct RunOutput {
    pub report: RunReport,
    pub metadata: RunMetadata,
    pub fit_log: FitLog,
}

/// Loads the data, evaluates the configured protocols and returns the
/// reports without touching the filesystem.
pub fn run(config: &PipelineConfig) -> Result<RunOutput> {
    config.validate()?;
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let dataset = config.load_dataset().map_err(|e| e.in_stage("load"))?;
    timings.insert("load".to_string(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let featurizer = PipelineFeaturizer::new(&dataset, config).map_err(|e| e.in_stage("extract"))?;
    timings.insert("extract".to_string(), t.elapsed().as_secs_f64());
    let log = FitLog::new();
    let classifier = config.classifier();

    let cv = if matches!(config.protocol, Protocol::Cv | Protocol::Both) {
        let t = Instant::now();
        let r = eval::repeated_split_cv(&featurizer, &config.eval, &classifier, config.seed, &log)
            .map_err(|e| e.in_stage("evaluate"))?;
        timings.insert("evaluate".to_string(), t.elapsed().as_secs_f64());
        Some(r)
    } else {
        None
    };
    let heldout = if matches!(config.protocol, Protocol::Heldout | Protocol::Both) {
        let t = Instant::now();
        let r = eval::heldout_ensemble_eval(&featurizer, &config.eval, &classifier, config.seed, &log)
            .map_err(|e| e.in_stage("holdout"))?;
        timings.insert("holdout".to_string(), t.elapsed().as_secs_f64());
        Some(r)
    } else {
        None
    };
    let violations = cv.as_ref().map_or(0, |r| eval::audit_cv(&log.records(), r).len());
    let (feature_dim, image_dim) = match &cv {
        Some(r) => (r.feature_dim, r.image_dim),
        None => {
            let d = feature_dims(&dataset, config);
            (d.0 + d.1, d.0)
        }
    };
    let report = RunReport {
        family: config.family,
        scenario: config.scenario,
        words: config.vocab.k,
        n_subjects: dataset.len(),
        feature_dim,
        image_dim,
        config: config.clone(),
        cv,
        heldout,
    };
    let metadata = RunMetadata {
        config: config.clone(),
        master_seed: config.seed,
        stage_seconds: timings,
        fit_records: log.records().len(),
        leakage_violations: violations,
    };
    Ok(RunOutput {
        report,
        metadata,
        fit_log: log,
    })
}

/// `(image, tabular)` feature counts implied by the configuration.
pub fn feature_dims(dataset: &Dataset, config: &PipelineConfig) -> (usize, usize) {
    let tabular = features::tabular_names().len();
    let image = match config.family {
        Family::RegionMean => dataset.metric_config.n_pairs(),
        _ => features::scopes(&dataset.metric_config, config.scenario).len() * config.vocab.k,
    };
    (image, tabular)
}

/// Writes the run's report, per-repeat CSV, fit log and metadata into
/// `out_dir`.
pub fn write_run(out: &RunOutput, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out.report)?)?;
    if let Some(cv) = &out.report.cv {
        cv.write_repeats_csv(dir.join("cv_repeats.csv"))?;
    }
    fs::write(dir.join("fit_log.json"), serde_json::to_string(&out.fit_log.records())?)?;
    fs::write(dir.join("run_metadata.json"), serde_json::to_string_pretty(&out.metadata)?)?;
    Ok(())
}

/// One row of a family comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub family: Family,
    pub scenario: Scenario,
    pub feature_dim: usize,
    pub cv_accuracy: Option<f64>,
    pub cv_sensitivity: Option<f64>,
    pub cv_specificity: Option<f64>,
    pub heldout_accuracy: Option<f64>,
}

/// Rows ordered by CV accuracy, descending; ties keep input order.
pub fn compare_reports(reports: &[(String, RunReport)]) -> Vec<CompareRow> {
    let mut rows: Vec<CompareRow> = reports
        .iter()
        .map(|(label, r)| CompareRow {
            label: label.clone(),
            family: r.family,
            scenario: r.scenario,
            feature_dim: r.feature_dim,
            cv_accuracy: r.cv.as_ref().and_then(|c| c.accuracy.mean),
            cv_sensitivity: r.cv.as_ref().and_then(|c| c.sensitivity.mean),
            cv_specificity: r.cv.as_ref().and_then(|c| c.specificity.mean),
            heldout_accuracy: r.heldout.as_ref().map(|h| h.mean_accuracy),
        })
        .collect();
    let key = |r: &CompareRow| r.cv_accuracy.unwrap_or(f64::NEG_INFINITY);
    rows.sort_by(|a, b| key(b).total_cmp(&key(a)));
    rows
}

pub fn write_compare_csv(rows: &[CompareRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "report",
        "family",
        "scenario",
        "dimension",
        "cv_accuracy",
        "cv_sensitivity",
        "cv_specificity",
        "heldout_accuracy",
    ])?;
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"));
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.family.name().to_string(),
            r.scenario.to_string(),
            r.feature_dim.to_string(),
            opt(r.cv_accuracy),
            opt(r.cv_sensitivity),
            opt(r.cv_specificity),
            opt(r.heldout_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text rendering of a comparison table.
pub fn format_compare_table(rows: &[CompareRow]) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
    let mut out = format!(
        "{:<12} {:<11} {:>5} {:>8} {:>8} {:>8} {:>8}  {}\n",
        "family", "scenario", "dim", "acc%", "sens%", "spec%", "held%", "report"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:<11} {:>5} {:>8} {:>8} {:>8} {:>8}  {}\n",
            r.family.name(),
            r.scenario.to_string(),
            r.feature_dim,
            pct(r.cv_accuracy),
            pct(r.cv_sensitivity),
            pct(r.cv_specificity),
            pct(r.heldout_accuracy),
            r.label
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(family: Family) -> PipelineConfig {
        PipelineConfig {
            phantom: PhantomSpec {
                n_subjects: 20,
                n_patients: 12,
                ..PhantomSpec::default()
            },
            family,
            cae: CaeSettings {
                epochs: 1,
                max_patches: Some(200),
                ..CaeSettings::default()
            },
            vocab: KmeansConfig {
                k: 4,
                ..KmeansConfig::default()
            },
            selection: SelectionConfig {
                budget: 2,
                ..SelectionConfig::default()
            },
            eval: EvalConfig {
                repeats: 2,
                strict_leakage: true,
                ..EvalConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn config_round_trip_and_validation() {
        let c = PipelineConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), c);
        c.validate().unwrap();
        let bad = PipelineConfig {
            patch: PatchGeometry {
                stride: 0,
                ..PatchGeometry::default()
            },
            ..PipelineConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn dims_per_family() {
        let ds = dataio::generate_phantom_dataset(&tiny_config(Family::RawBow).phantom).unwrap();
        let mut c = PipelineConfig::default();
        assert_eq!(feature_dims(&ds, &c), (260, 6));
        c.family = Family::RegionMean;
        assert_eq!(feature_dims(&ds, &c), (13, 6));
        c.family = Family::DeepBow;
        c.scenario = Scenario::Stacked;
        c.vocab.k = 130;
        assert_eq!(feature_dims(&ds, &c).0, 260);
    }

    #[test]
    fn raw_bow_features_have_expected_shape() {
        let config = tiny_config(Family::RawBow);
        let ds = config.load_dataset().unwrap();
        let f = PipelineFeaturizer::new(&ds, &config).unwrap();
        let rows: Vec<usize> = (0..10).collect();
        let x = f.fit_features(&rows, FitContext::CvRepeat(0), &FitLog::new(), 1).unwrap();
        assert_eq!(x.n_rows(), 20);
        assert_eq!(x.n_cols(), 13 * 4 + 6);
        for i in 0..20 {
            let s: f64 = x.values.row(i).iter().take(4).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn strict_deep_bow_run_is_leak_free_and_reproducible() {
        let config = tiny_config(Family::DeepBow);
        let a = run(&config).unwrap();
        assert_eq!(a.metadata.leakage_violations, 0);
        let b = run(&config).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
        assert_eq!(a.report.feature_dim, 13 * 4 + 6);
    }

    #[test]
    fn shared_cae_is_flagged_by_the_audit() {
        let mut config = tiny_config(Family::DeepBow);
        config.eval.strict_leakage = false;
        config.scenario = Scenario::Stacked;
        let out = run(&config).unwrap();
        assert!(out.metadata.leakage_violations > 0);
        assert_eq!(out.report.image_dim, 2 * 4);
    }

    #[test]
    fn compare_orders_by_accuracy() {
        let config = tiny_config(Family::RegionMean);
        let mut base = run(&config).unwrap().report;
        base.cv.as_mut().unwrap().accuracy.mean = Some(0.5);
        let mut better = base.clone();
        better.family = Family::RawBow;
        better.cv.as_mut().unwrap().accuracy.mean = Some(0.99);
        let rows = compare_reports(&[
            ("a".into(), base.clone()),
            ("b".into(), better),
            ("c".into(), base.clone()),
        ]);
        assert_eq!(rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), ["b", "a", "c"]);
        assert_eq!(rows[1].cv_accuracy, rows[2].cv_accuracy);
        assert_eq!(rows[1].feature_dim, 19);
        assert_eq!(format_compare_table(&rows).lines().count(), 4);
    }
}
