use log::{info, warn};
use ndarray::{ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{confusion_counts, stratified_split, validation_size, ConfusionCounts, Metrics};
use super::{EvalConfig, EvalError, FitContext, FitLog, Featurizer};
use crate::dataio::Label;
use crate::features::{FeatureMatrix, Standardizer};
use crate::learn::{
    forward_select, grid_search, svm_train, GridResult, LearnError, SelectionConfig, SelectionResult, SmoConfig,
    SvmGrid, SvmModel, SvmParams,
};
use crate::seed::{self, stream};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub selection: SelectionConfig,
    pub grid: SvmGrid,
    pub smo: SmoConfig,
    /// Treat an SVM that hit its iteration cap as an error.
    pub strict: bool,
}

/// Selection, standardization, tuned SVM; all fit on one training side.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub selection: SelectionResult,
    pub standardizer: Standardizer,
    pub grid: GridResult,
    pub model: SvmModel,
}

impl TrainedClassifier {
    pub fn decision(&self, row: ArrayView1<f64>) -> f64 {
        let picked = ndarray::Array1::from_iter(self.selection.selected.iter().map(|&j| row[j]));
        let z = self.standardizer.apply_row(picked.view());
        self.model.decision(ArrayView1::from(&z))
    }

    pub fn predict(&self, row: ArrayView1<f64>) -> Label {
        if self.decision(row) >= 0.0 {
            Label::Patient
        } else {
            Label::Control
        }
    }
}

fn ids_of(x: &FeatureMatrix, rows: &[usize]) -> Vec<String> {
    rows.iter().map(|&i| x.ids[i].clone()).collect()
}

/// Fits the classifier stage on `train` rows of `x`.
pub fn fit_classifier(
    x: &FeatureMatrix,
    train: &[usize],
    config: &ClassifierConfig,
    seed_value: u64,
    context: FitContext,
    log: &FitLog,
) -> Result<TrainedClassifier> {
    let xt = x.values.select(Axis(0), train);
    let y: Vec<f64> = train.iter().map(|&i| x.labels[i].sign()).collect();
    let ids = ids_of(x, train);

    let selection = forward_select(
        xt.view(),
        &y,
        &x.names,
        &config.selection,
        seed::derive(seed_value, stream::SELECTION, 0),
        &config.smo,
    )?;
    log.record(context, "selection", ids.clone());

    let xs = xt.select(Axis(1), &selection.selected);
    let standardizer = Standardizer::fit(&xs);
    log.record(context, "standardizer", ids.clone());
    let z = standardizer.apply(&xs);

    let grid = grid_search(
        z.view(),
        &y,
        &config.grid,
        seed::derive(seed_value, stream::GRID, 0),
        &config.smo,
    )?;
    log.record(context, "grid", ids.clone());

    let mut model = svm_train(z.view(), &y, grid.best, &config.smo)?;
    model.feature_names = selection.names.clone();
    log.record(context, "svm", ids);
    if !model.converged {
        if config.strict {
            return Err(LearnError::NoConvergence {
                iterations: model.iterations,
            }
            .into());
        }
        warn!("svm hit its iteration cap ({} iterations) in {context}", model.iterations);
    }
    Ok(TrainedClassifier {
        selection,
        standardizer,
        grid,
        model,
    })
}

/// Validation accuracy of the first `s` selected columns for every `s`,
/// with the selection-time SVM parameters.
fn prefix_curve(
    x: &FeatureMatrix,
    train: &[usize],
    val: &[usize],
    selected: &[usize],
    config: &ClassifierConfig,
    context: FitContext,
    log: &FitLog,
) -> Result<Vec<f64>> {
    let y: Vec<f64> = train.iter().map(|&i| x.labels[i].sign()).collect();
    let mut curve = Vec::with_capacity(selected.len());
    for s in 1..=selected.len() {
        let cols = &selected[..s];
        let xt = x.values.select(Axis(0), train).select(Axis(1), cols);
        let st = Standardizer::fit(&xt);
        let params = SvmParams {
            c: config.selection.c,
            gamma: config.selection.gamma_scale / s as f64,
        };
        let model = svm_train(st.apply(&xt).view(), &y, params, &config.smo)?;
        let correct = val
            .iter()
            .filter(|&&i| {
                let row = x.values.row(i).select(Axis(0), cols);
                let z = st.apply_row(row.view());
                let f = model.decision(ArrayView1::from(&z));
                (f >= 0.0) == x.labels[i].is_positive()
            })
            .count();
        curve.push(correct as f64 / val.len() as f64);
    }
    log.record(context, "curve", ids_of(x, train));
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Number of defined values summarized.
    pub n: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        if n == 0 {
            return Self {
                mean: None,
                std: None,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            Some((v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt())
        } else {
            None
        };
        Self {
            mean: Some(mean),
            std,
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    pub validation_ids: Vec<String>,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub selected: Vec<String>,
    pub params: SvmParams,
    /// Inner-CV accuracy after each greedy addition.
    pub selection_curve: Vec<f64>,
    /// Validation accuracy of each selected-prefix size.
    pub validation_curve: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub n_subjects: usize,
    pub feature_dim: usize,
    pub image_dim: usize,
    pub validation_size: usize,
    pub master_seed: u64,
    pub config: EvalConfig,
    pub accuracy: Summary,
    pub sensitivity: Summary,
    pub specificity: Summary,
    pub mean_selection_curve: Vec<f64>,
    pub mean_validation_curve: Vec<f64>,
    pub nonconverged: usize,
    pub repeats: Vec<RepeatResult>,
}

impl CvReport {
    #[cfg(test)]
    pub(crate) fn for_audit(splits: Vec<(usize, Vec<String>)>) -> Self {
        let repeats = splits
            .into_iter()
            .map(|(repeat, validation_ids)| RepeatResult {
                repeat,
                seed: 0,
                validation_ids,
                counts: ConfusionCounts::default(),
                metrics: ConfusionCounts::default().metrics(),
                selected: vec![],
                params: SvmParams { c: 1.0, gamma: 1.0 },
                selection_curve: vec![],
                validation_curve: vec![],
                converged: true,
            })
            .collect();
        Self {
            n_subjects: 0,
            feature_dim: 0,
            image_dim: 0,
            validation_size: 0,
            master_seed: 0,
            config: EvalConfig::default(),
            accuracy: Summary::of([]),
            sensitivity: Summary::of([]),
            specificity: Summary::of([]),
            mean_selection_curve: vec![],
            mean_validation_curve: vec![],
            nonconverged: 0,
            repeats,
        }
    }

    pub fn write_repeats_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["repeat", "accuracy", "sensitivity", "specificity", "C", "gamma", "selected"])?;
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"));
        for r in &self.repeats {
            w.write_record([
                r.repeat.to_string(),
                opt(r.metrics.accuracy),
                opt(r.metrics.sensitivity),
                opt(r.metrics.specificity),
                format!("{:?}", r.params.c),
                format!("{:?}", r.params.gamma),
                r.selected.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_curves(curves: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let curves: Vec<Vec<f64>> = curves.collect();
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|s| curves.iter().map(|c| c[s]).sum::<f64>() / curves.len() as f64)
        .collect()
}

/// Repeated stratified 80/20 evaluation. Every repeat refits the
/// featurizer and the classifier on its training side and scores its
/// validation side.
pub fn repeated_split_cv(
    featurizer: &dyn Featurizer,
    eval: &EvalConfig,
    classifier: &ClassifierConfig,
    master_seed: u64,
    log: &FitLog,
) -> Result<CvReport> {
    eval.validate()?;
    let (_, labels) = featurizer.subjects();
    let n = labels.len();
    let val_size = validation_size(n, eval.validation_fraction);
    let results: Vec<(RepeatResult, usize, usize)> = (0..eval.repeats)
        .into_par_iter()
        .map(|r| -> Result<_> {
            let rs = seed::derive(master_seed, stream::CV_REPEAT, r as u64);
            let (train, val) = stratified_split(labels, val_size, rs)?;
            let ctx = FitContext::CvRepeat(r);
            let x = featurizer.fit_features(&train, ctx, log, rs)?;
            let clf = fit_classifier(&x, &train, classifier, rs, ctx, log)?;
            let preds: Vec<Label> = val.iter().map(|&i| clf.predict(x.values.row(i))).collect();
            let truth: Vec<Label> = val.iter().map(|&i| x.labels[i]).collect();
            let counts = confusion_counts(&preds, &truth)?;
            let validation_curve = prefix_curve(&x, &train, &val, &clf.selection.selected, classifier, ctx, log)?;
            info!(
                "cv repeat {r}: accuracy {:.3}",
                counts.metrics().accuracy.unwrap_or(f64::NAN)
            );
            Ok((
                RepeatResult {
                    repeat: r,
                    seed: rs,
                    validation_ids: val.iter().map(|&i| x.ids[i].clone()).collect(),
                    counts,
                    metrics: counts.metrics(),
                    selected: clf.selection.names.clone(),
                    params: clf.grid.best,
                    selection_curve: clf.selection.accuracy_curve.clone(),
                    validation_curve,
                    converged: clf.model.converged,
                },
                x.n_cols(),
                x.imaging_columns().len(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (feature_dim, image_dim) = results.first().map_or((0, 0), |(_, d, i)| (*d, *i));
    let repeats: Vec<RepeatResult> = results.into_iter().map(|(r, _, _)| r).collect();
    Ok(CvReport {
        n_subjects: n,
        feature_dim,
        image_dim,
        validation_size: val_size,
        master_seed,
        config: eval.clone(),
        accuracy: Summary::of(repeats.iter().map(|r| r.metrics.accuracy)),
        sensitivity: Summary::of(repeats.iter().map(|r| r.metrics.sensitivity)),
        specificity: Summary::of(repeats.iter().map(|r| r.metrics.specificity)),
        mean_selection_curve: mean_curves(repeats.iter().map(|r| r.selection_curve.clone())),
        mean_validation_curve: mean_curves(repeats.iter().map(|r| r.validation_curve.clone())),
        nonconverged: repeats.iter().filter(|r| !r.converged).count(),
        repeats,
    })
}

/// Member-major votes to one label per sample; ties go to positive.
pub fn majority_vote(votes: &[Vec<Label>]) -> Vec<Label> {
    let n = votes.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let pos = votes.iter().filter(|v| v[i].is_positive()).count();
            if 2 * pos >= votes.len() {
                Label::Patient
            } else {
                Label::Control
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub seed: u64,
    pub heldout_ids: Vec<String>,
    /// Positive votes per heldout sample.
    pub positive_votes: Vec<usize>,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub accuracy: f64,
    /// Mean inner-validation accuracy of the ensemble members.
    pub member_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutReport {
    pub master_seed: u64,
    pub config: EvalConfig,
    pub heldout_size: usize,
    pub ensemble_size: usize,
    pub mean_accuracy: f64,
    pub rounds: Vec<RoundResult>,
}

/// Heldout-ensemble evaluation: per round, hold out a stratified set, fit
/// the featurizer on the rest, train `ensemble_size` classifiers on random
/// 80/20 splits of the rest and score the heldout set by majority vote.
pub fn heldout_ensemble_eval(
    featurizer: &dyn Featurizer,
    eval: &EvalConfig,
    classifier: &ClassifierConfig,
    master_seed: u64,
    log: &FitLog,
) -> Result<HeldoutReport> {
    eval.validate()?;
    let (_, labels) = featurizer.subjects();
    if labels.len() <= eval.heldout_size {
        return Err(EvalError::TooFewSamples(format!(
            "{} subjects cannot leave a training pool after holding out {}",
            labels.len(),
            eval.heldout_size
        ))
        .into());
    }
    let mut rounds = Vec::with_capacity(eval.rounds);
    for q in 0..eval.rounds {
        let qs = seed::derive(master_seed, stream::HELDOUT_ROUND, q as u64);
        let (rest, held) = stratified_split(labels, eval.heldout_size, qs)?;
        let x = featurizer.fit_features(&rest, FitContext::HeldoutRound(q), log, qs)?;
        let rest_labels: Vec<Label> = rest.iter().map(|&i| labels[i]).collect();
        let inner_val = validation_size(rest.len(), eval.validation_fraction);
        let members: Vec<(Vec<Label>, f64)> = (0..eval.ensemble_size)
            .into_par_iter()
            .map(|m| -> Result<_> {
                let ms = seed::derive(qs, stream::ENSEMBLE_MEMBER, m as u64);
                let (tr, va) = stratified_split(&rest_labels, inner_val, ms)?;
                let tr: Vec<usize> = tr.iter().map(|&i| rest[i]).collect();
                let va: Vec<usize> = va.iter().map(|&i| rest[i]).collect();
                let clf = fit_classifier(&x, &tr, classifier, ms, FitContext::HeldoutMember { round: q, member: m }, log)?;
                let member_acc =
                    va.iter().filter(|&&i| clf.predict(x.values.row(i)) == x.labels[i]).count() as f64 / va.len() as f64;
                Ok((held.iter().map(|&i| clf.predict(x.values.row(i))).collect(), member_acc))
            })
            .collect::<Result<Vec<_>>>()?;
        let votes: Vec<Vec<Label>> = members.iter().map(|(v, _)| v.clone()).collect();
        let preds = majority_vote(&votes);
        let truth: Vec<Label> = held.iter().map(|&i| labels[i]).collect();
        let counts = confusion_counts(&preds, &truth)?;
        let accuracy = counts.metrics().accuracy.unwrap_or(0.0);
        info!("heldout round {q}: accuracy {accuracy:.3}");
        rounds.push(RoundResult {
            round: q,
            seed: qs,
            heldout_ids: held.iter().map(|&i| x.ids[i].clone()).collect(),
            positive_votes: (0..held.len())
                .map(|i| votes.iter().filter(|v| v[i].is_positive()).count())
                .collect(),
            counts,
            metrics: counts.metrics(),
            accuracy,
            member_accuracy: members.iter().map(|(_, a)| a).sum::<f64>() / members.len() as f64,
        });
    }
    Ok(HeldoutReport {
        master_seed,
        config: eval.clone(),
        heldout_size: eval.heldout_size,
        ensemble_size: eval.ensemble_size,
        mean_accuracy: rounds.iter().map(|r| r.accuracy).sum::<f64>() / rounds.len() as f64,
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::audit_cv;
    use ndarray::Array2;
    use rand::Rng;

    /// Fixed matrix: column 0 carries the label, the rest is noise.
    struct Fixed {
        x: FeatureMatrix,
    }

    impl Featurizer for Fixed {
        fn fit_features(&self, train: &[usize], context: FitContext, log: &FitLog, _seed: u64) -> Result<FeatureMatrix> {
            log.record(context, "fixed", train.iter().map(|&i| self.x.ids[i].clone()));
            Ok(self.x.clone())
        }
        fn subjects(&self) -> (&[String], &[Label]) {
            (&self.x.ids, &self.x.labels)
        }
    }

    fn fixed(n: usize) -> Fixed {
        let mut rng = crate::seed::rng(3);
        let labels: Vec<Label> = (0..n).map(|i| if i % 5 < 3 { Label::Patient } else { Label::Control }).collect();
        let values = Array2::from_shape_fn((n, 4), |(i, j)| {
            let noise: f64 = rng.gen_range(-1.0..1.0);
            if j == 0 {
                labels[i].sign() + 0.3 * noise
            } else {
                noise
            }
        });
        let x = FeatureMatrix::new(
            (0..n).map(|i| format!("S{i:03}")).collect(),
            (0..4).map(|j| format!("cc/FA/bin{j:02}")).collect(),
            labels,
            values,
        )
        .unwrap();
        Fixed { x }
    }

    fn small_config() -> ClassifierConfig {
        ClassifierConfig {
            selection: SelectionConfig {
                budget: 2,
                ..SelectionConfig::default()
            },
            ..ClassifierConfig::default()
        }
    }

    #[test]
    fn cv_is_reproducible_and_leak_free() {
        let f = fixed(40);
        let eval = EvalConfig {
            repeats: 4,
            ..EvalConfig::default()
        };
        let log = FitLog::new();
        let a = repeated_split_cv(&f, &eval, &small_config(), 11, &log).unwrap();
        let b = repeated_split_cv(&f, &eval, &small_config(), 11, &FitLog::new()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.repeats.len(), 4);
        assert_eq!(a.validation_size, 8);
        assert!(a.repeats.iter().all(|r| r.validation_ids.len() == 8));
        assert!(a.accuracy.mean.unwrap() > 0.8);
        assert!(audit_cv(&log.records(), &a).is_empty());
        for r in &a.repeats {
            assert_eq!(r.counts.metrics().accuracy, r.metrics.accuracy);
        }
    }

    #[test]
    fn heldout_shape() {
        let f = fixed(40);
        let eval = EvalConfig {
            rounds: 2,
            ensemble_size: 3,
            heldout_size: 10,
            ..EvalConfig::default()
        };
        let r = heldout_ensemble_eval(&f, &eval, &small_config(), 5, &FitLog::new()).unwrap();
        assert_eq!(r.rounds.len(), 2);
        assert!(r.rounds.iter().all(|q| q.heldout_ids.len() == 10 && q.positive_votes.iter().all(|&v| v <= 3)));
        let too_big = EvalConfig {
            heldout_size: 40,
            ..eval
        };
        assert!(heldout_ensemble_eval(&f, &too_big, &small_config(), 5, &FitLog::new()).is_err());
    }

    #[test]
    fn votes() {
        use Label::{Control as N, Patient as P};
        assert_eq!(majority_vote(&[vec![N, P]]), vec![N, P]);
        assert_eq!(majority_vote(&[vec![N, P], vec![P, N]]), vec![P, P]);
        assert_eq!(majority_vote(&[vec![N], vec![N], vec![P]]), vec![N]);
        assert_eq!(majority_vote(&vec![vec![P, N]; 50]), vec![P, N]);
    }
}
