//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! `DEEPBOW_ACCEPTANCE=2,4` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use deepbow::cae::{self, AutoEncoder, Batch, CaeArch, TrainConfig};
use deepbow::dataio::{self, Label, PhantomSpec, Region};
use deepbow::eval::{self, confusion_metrics, CvReport, FitContext, FitLog};
use deepbow::features::Scenario;
use deepbow::learn::{dual_objective, kernel_from_sq_dists, kkt_violations, qp_oracle_kernel, solve_dual, sq_dists};
use deepbow::patchex::{self, PatchSet, PatchSource};
use deepbow::pipeline::{self, CaeSettings, Family, PipelineConfig, PipelineFeaturizer, Protocol, RunOutput};
use deepbow::seed::{self, stream};
use deepbow::vocab::{self, FeatureKind, KmeansConfig, Scope};

// Tolerances.
const GRAD_EPS: f64 = 1e-4;
const GRAD_MAX_REL: f64 = 1e-4;
const GRAD_DRAWS: usize = 20;
const DESCENT_PATCHES: usize = 10_000;
const DESCENT_RUNS: usize = 20;
const DESCENT_MIN_PASS: usize = 19;
const SVM_INSTANCES: usize = 100;
const SVM_MAX_N: usize = 20;
const SVM_OBJ_REL: f64 = 1e-6;
const KKT_TOL: f64 = 1e-3;
const KMEANS_INSTANCES: usize = 200;
const KMEANS_MAX_N: usize = 8;
const CONFUSION_MAX_TOTAL: usize = 8;
const REGION_MEAN_MAX_ACC: f64 = 0.62;
const BOW_MIN_ACC: f64 = 0.85;
const CV_REPEATS: usize = 50;
const CV_VALIDATION: usize = 23;
const HELDOUT_ROUNDS: usize = 6;
const HELDOUT_SIZE: usize = 20;
const ENSEMBLE: usize = 50;

struct Suite {
    only: Option<Vec<usize>>,
    lines: Vec<(usize, bool)>,
}

impl Suite {
    fn wants(&self, id: usize) -> bool {
        self.only.as_ref().is_none_or(|o| o.contains(&id))
    }

    fn report(&mut self, id: usize, name: &str, pass: bool, detail: &str, secs: f64) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} [{id}] {name}: {detail} ({secs:.1}s)");
        self.lines.push((id, pass));
    }
}

fn main() -> ExitCode {
    let only = std::env::var("DEEPBOW_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut suite = Suite {
        only,
        lines: Vec::new(),
    };
    println!("deepbow acceptance suite");

    type Check = fn(&mut Shared) -> (bool, String);
    let checks: [(usize, &str, Check); 9] = [
        (1, "dimension accounting", dimension_accounting),
        (2, "gradient oracle", gradient_oracle),
        (3, "training descent", training_descent),
        (4, "SVM oracle equivalence", svm_oracle),
        (5, "k-means local optimality", kmeans_optimality),
        (6, "confusion-rate exactness", confusion_exactness),
        (7, "family ordering on phantoms", family_ordering),
        (8, "protocol fidelity", protocol_fidelity),
        (9, "no-leakage audit", leakage_audit),
    ];
    let mut shared = Shared::default();
    for (id, name, check) in checks {
        if !suite.wants(id) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = check(&mut shared);
        suite.report(id, name, pass, &detail, t.elapsed().as_secs_f64());
    }
    let failed: Vec<usize> = suite.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    println!(
        "{} of {} criteria passed{}",
        suite.lines.len() - failed.len(),
        suite.lines.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {failed:?}")
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// Runs reused across criteria 7-9.
#[derive(Default)]
struct Shared {
    family_runs: BTreeMap<&'static str, RunOutput>,
}

impl Shared {
    fn family_run(&mut self, family: Family) -> &RunOutput {
        self.family_runs.entry(family.name()).or_insert_with(|| {
            let config = PipelineConfig {
                family,
                protocol: Protocol::Cv,
                ..PipelineConfig::default()
            };
            pipeline::run(&config).expect("family run")
        })
    }
}

fn dimension_accounting(_: &mut Shared) -> (bool, String) {
    let spec = PhantomSpec {
        n_subjects: 12,
        n_patients: 6,
        ..PhantomSpec::default()
    };
    let ds = dataio::generate_phantom_dataset(&spec).expect("phantom");
    let mut found = Vec::new();
    let cases = [(Scenario::PerMetric, 20, 260), (Scenario::PerMetric, 30, 390), (Scenario::Stacked, 130, 260), (Scenario::Stacked, 190, 380)];
    let mut ok = true;
    for (scenario, k, want_image) in cases {
        let config = PipelineConfig {
            family: Family::RawBow,
            scenario,
            vocab: KmeansConfig {
                k,
                max_iters: 5,
                ..KmeansConfig::default()
            },
            ..PipelineConfig::default()
        };
        let f = PipelineFeaturizer::new(&ds, &config).expect("featurizer");
        let rows: Vec<usize> = (0..ds.len()).collect();
        let a = f.fit(&rows, FitContext::Shared, &FitLog::new(), 1, None).expect("fit");
        let x = f.transform(&a).expect("transform");
        let image = x.imaging_columns().len();
        ok &= image == want_image && x.n_cols() == want_image + 6;
        found.push(format!("{scenario} k={k}: {image}+{}", x.n_cols() - image));
    }
    (ok, found.join(", "))
}

/// Central differences over every parameter of random shrunken models.
/// Coordinates whose one-sided slopes disagree straddle a ReLU or max-pool
/// kink and are skipped.
fn gradient_oracle(_: &mut Shared) -> (bool, String) {
    let arch = CaeArch {
        size: 8,
        channels: 1,
        widths: vec![2, 2, 2, 4],
    };
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    for draw in 0..GRAD_DRAWS {
        let mut rng = seed::rng(seed::derive(2, 0, draw as u64));
        let mut model = AutoEncoder::<f64>::init(arch.clone(), draw as u64).expect("arch");
        let params: Vec<f64> = model
            .params()
            .iter()
            .map(|p| p + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        model.set_params(&params).expect("params");
        let n = 1 + draw % 3;
        let values: Vec<f64> = (0..n * 64).map(|_| rng.sample(StandardNormal)).collect();
        let batch = Batch::new(n, 64, values).expect("batch");
        let (_, grads) = model.loss_and_gradients(&batch).expect("gradients");
        let analytic = grads.flatten();
        let loss_at = |p: &[f64]| {
            let mut m = model.clone();
            m.set_params(p).expect("params");
            let out = m.forward(&batch).expect("forward");
            cae::loss(&out.reconstructions, &batch).expect("loss")
        };
        let f0 = loss_at(&params);
        for (j, &a) in analytic.iter().enumerate() {
            let mut p = params.clone();
            p[j] = params[j] + GRAD_EPS;
            let fp = loss_at(&p);
            p[j] = params[j] - GRAD_EPS;
            let fm = loss_at(&p);
            let (fwd, bwd) = ((fp - f0) / GRAD_EPS, (f0 - fm) / GRAD_EPS);
            if (fwd - bwd).abs() > 1e-3 * (fwd.abs() + bwd.abs()) + 1e-6 {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * GRAD_EPS);
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < 1e-8 { 0.0 } else { (a - numeric).abs() / scale };
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let coverage = checked as f64 / (checked + skipped) as f64;
    (
        worst < GRAD_MAX_REL && coverage >= 0.9,
        format!("max rel error {worst:.2e} over {checked} coordinates in {GRAD_DRAWS} draws, {skipped} kink-skipped"),
    )
}

fn training_descent(_: &mut Shared) -> (bool, String) {
    let spec = PhantomSpec {
        cc_dims: [64, 48, 2],
        thalamus_dims: [48, 48, 2],
        ..PhantomSpec::default()
    };
    let ds = dataio::generate_phantom_dataset(&spec).expect("phantom");
    let geom = patchex::PatchGeometry::default();
    let mut sets = Vec::new();
    for s in &ds.subjects {
        for region in [Region::Cc, Region::Thalamus] {
            let vol = s.volume(region, "FA").expect("FA volume");
            sets.push(patchex::extract_patches(vol, &geom, PatchSource::new(&s.id, region, "FA")).expect("patches"));
        }
    }
    let all = PatchSet::concat(sets.iter()).expect("concat");
    let first: Vec<usize> = (0..DESCENT_PATCHES.min(all.len())).collect();
    let raw = all.select(&first);
    let norm = patchex::fit_norm(&raw).expect("norm");
    let set = patchex::apply_norm(&raw, &norm).expect("apply");
    let mut passed = 0;
    let mut ratios = Vec::new();
    for run in 0..DESCENT_RUNS {
        let init = AutoEncoder::<f32>::init(CaeArch::per_metric(), seed::derive(3, stream::CAE_INIT, run as u64)).expect("init");
        let cfg = TrainConfig {
            shuffle_seed: seed::derive(3, stream::CAE_SHUFFLE, run as u64),
            ..TrainConfig::default()
        };
        let (_, trace) = cae::train(init, &set, &cfg).expect("train");
        let (first, last) = (trace[0], *trace.last().expect("epochs"));
        passed += usize::from(last < first);
        ratios.push(last / first);
    }
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    (
        passed >= DESCENT_MIN_PASS,
        format!(
            "{passed}/{DESCENT_RUNS} runs descend on {} patches (mean final/first {mean_ratio:.5})",
            set.len()
        ),
    )
}

fn svm_oracle(_: &mut Shared) -> (bool, String) {
    let mut rng = seed::rng(4);
    let (mut worst, mut disagreements, mut kkt_bad, mut models) = (0.0f64, 0usize, 0usize, 0usize);
    for _ in 0..SVM_INSTANCES {
        let n = rng.gen_range(4..=SVM_MAX_N);
        let d = rng.gen_range(1..=4);
        let x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        let mut y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        y[0] = 1.0;
        y[1] = -1.0;
        let c = [0.1, 1.0, 10.0, 100.0][rng.gen_range(0..4)];
        let gamma = [0.1, 0.5, 1.0, 2.0][rng.gen_range(0..4)] / d as f64;
        let k = kernel_from_sq_dists(&sq_dists(x.view(), x.view()), gamma);

        let tight = solve_dual(&k, &y, c, 1e-9, 1_000_000).expect("smo");
        let oracle = qp_oracle_kernel(&k, &y, c).expect("oracle");
        let (os, oq) = (dual_objective(&k, &y, &tight.alpha), dual_objective(&k, &y, &oracle.alpha));
        worst = worst.max((os - oq).abs() / oq.abs().max(1e-12));
        let predict = |alpha: &[f64], b: f64, i: usize| {
            let f: f64 = (0..n).map(|j| alpha[j] * y[j] * k[[i, j]]).sum::<f64>() + b;
            f >= 0.0
        };
        disagreements += (0..n)
            .filter(|&i| predict(&tight.alpha, tight.bias, i) != predict(&oracle.alpha, oracle.bias, i))
            .count();

        let default = solve_dual(&k, &y, c, KKT_TOL, 100 * n).expect("smo");
        for sol in [&tight, &default] {
            models += 1;
            kkt_bad += usize::from(kkt_violations(&k, &y, &sol.alpha, sol.bias, c, KKT_TOL) > 0);
        }
    }
    (
        worst <= SVM_OBJ_REL && disagreements == 0 && kkt_bad == 0,
        format!(
            "max objective rel diff {worst:.2e}, {disagreements} prediction disagreements, {kkt_bad}/{models} models with KKT violations"
        ),
    )
}

fn kmeans_optimality(_: &mut Shared) -> (bool, String) {
    let mut rng = seed::rng(5);
    let (mut fixed, mut above, mut optimal) = (0usize, 0usize, 0usize);
    for _ in 0..KMEANS_INSTANCES {
        let n = rng.gen_range(3..=KMEANS_MAX_N);
        let d = rng.gen_range(1..=3);
        let data = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let cfg = KmeansConfig {
            k: 2,
            max_iters: 1000,
            tol: 0.0,
        };
        let fit = vocab::kmeans_fit(data.view(), &cfg, Scope::new(Region::Cc, "FA"), FeatureKind::Raw, rng.gen())
            .expect("kmeans");
        let cents = &fit.codebook.centroids;
        let sq = |i: usize, c: &[f64]| (0..d).map(|t| (data[[i, t]] - c[t]).powi(2)).sum::<f64>();
        let nearest_ok = (0..n).all(|i| {
            let own = sq(i, &cents[fit.assignments[i]]);
            cents.iter().all(|c| own <= sq(i, c) + 1e-12)
        });
        let means_ok = (0..2).all(|j| {
            let members: Vec<usize> = (0..n).filter(|&i| fit.assignments[i] == j).collect();
            !members.is_empty()
                && (0..d).all(|t| {
                    let m = members.iter().map(|&i| data[[i, t]]).sum::<f64>() / members.len() as f64;
                    (m - cents[j][t]).abs() < 1e-12
                })
        });
        fixed += usize::from(nearest_ok && means_ok);
        let best = exhaustive_two_means(&data);
        let inertia = fit.inertia();
        above += usize::from(inertia >= best - 1e-12);
        optimal += usize::from((inertia - best).abs() <= 1e-9 * best.max(1.0));
    }
    let share = optimal as f64 / KMEANS_INSTANCES as f64;
    (
        fixed == KMEANS_INSTANCES && above == KMEANS_INSTANCES,
        format!(
            "{fixed}/{KMEANS_INSTANCES} fixed points, {above}/{KMEANS_INSTANCES} at or above the exhaustive optimum, {:.1}% optimal",
            100.0 * share
        ),
    )
}

fn exhaustive_two_means(data: &Array2<f64>) -> f64 {
    let (n, d) = data.dim();
    let mut best = f64::INFINITY;
    for mask in 1..(1u32 << n) - 1 {
        let mut total = 0.0;
        for side in [true, false] {
            let rows: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).collect();
            for t in 0..d {
                let m = rows.iter().map(|&i| data[[i, t]]).sum::<f64>() / rows.len() as f64;
                total += rows.iter().map(|&i| (data[[i, t]] - m).powi(2)).sum::<f64>();
            }
        }
        best = best.min(total);
    }
    best
}

fn confusion_exactness(_: &mut Shared) -> (bool, String) {
    let (mut tables, mut mismatches) = (0usize, 0usize);
    for total in 1..=CONFUSION_MAX_TOTAL {
        for tp in 0..=total {
            for fp in 0..=total - tp {
                for tn in 0..=total - tp - fp {
                    let fn_ = total - tp - fp - tn;
                    let mut pred = Vec::new();
                    let mut truth = Vec::new();
                    for (count, p, t) in [
                        (tp, Label::Patient, Label::Patient),
                        (fp, Label::Patient, Label::Control),
                        (tn, Label::Control, Label::Control),
                        (fn_, Label::Control, Label::Patient),
                    ] {
                        pred.extend(std::iter::repeat_n(p, count));
                        truth.extend(std::iter::repeat_n(t, count));
                    }
                    let m = confusion_metrics(&pred, &truth).expect("metrics");
                    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
                    let want = (ratio(tp + tn, total), ratio(tp, tp + fn_), ratio(tn, tn + fp));
                    tables += 1;
                    mismatches += usize::from((m.accuracy, m.sensitivity, m.specificity) != want);
                }
            }
        }
    }
    (mismatches == 0, format!("{tables} tables, {mismatches} mismatches"))
}

fn cv_accuracy(report: &CvReport) -> f64 {
    report.accuracy.mean.unwrap_or(f64::NAN)
}

fn family_ordering(shared: &mut Shared) -> (bool, String) {
    let mut acc = BTreeMap::new();
    for family in [Family::RegionMean, Family::RawBow, Family::DeepBow] {
        let run = shared.family_run(family);
        acc.insert(family.name(), cv_accuracy(run.report.cv.as_ref().expect("cv")));
    }
    let (rm, rb, db) = (acc["region-mean"], acc["raw-bow"], acc["deep-bow"]);
    (
        rm <= REGION_MEAN_MAX_ACC && rb >= BOW_MIN_ACC && db >= BOW_MIN_ACC,
        format!("CV accuracy region-mean {rm:.3}, raw-bow {rb:.3}, deep-bow {db:.3}"),
    )
}

fn protocol_fidelity(shared: &mut Shared) -> (bool, String) {
    let mut ok = true;
    let mut notes = Vec::new();
    let mut check = |cond: bool, what: String| {
        ok &= cond;
        if !cond {
            notes.push(what);
        }
    };
    for family in [Family::DeepBow, Family::RawBow, Family::RegionMean] {
        let run = shared.family_run(family);
        let cv = run.report.cv.as_ref().expect("cv");
        check(cv.repeats.len() == CV_REPEATS, format!("{}: {} repeats", family.name(), cv.repeats.len()));
        check(run.report.n_subjects == 114, format!("{} subjects", run.report.n_subjects));
        let labels: BTreeMap<String, Label> = dataio::generate_phantom_dataset(&PhantomSpec::default())
            .expect("phantom")
            .subjects
            .into_iter()
            .map(|s| (s.id, s.label))
            .collect();
        let expected_pos = CV_VALIDATION as f64 * 70.0 / 114.0;
        for r in &cv.repeats {
            let pos = r.validation_ids.iter().filter(|id| labels[*id].is_positive()).count();
            check(
                r.validation_ids.len() == CV_VALIDATION && (pos as f64 - expected_pos).abs() <= 1.0,
                format!("repeat {}: {} validation, {pos} positive", r.repeat, r.validation_ids.len()),
            );
        }
    }

    let config = PipelineConfig {
        family: Family::RegionMean,
        protocol: Protocol::Both,
        ..PipelineConfig::default()
    };
    let a = pipeline::run(&config).expect("run");
    let b = pipeline::run(&config).expect("run");
    let h = a.report.heldout.as_ref().expect("heldout");
    check(h.rounds.len() == HELDOUT_ROUNDS, format!("{} rounds", h.rounds.len()));
    check(h.ensemble_size == ENSEMBLE, format!("ensemble {}", h.ensemble_size));
    for r in &h.rounds {
        check(
            r.heldout_ids.len() == HELDOUT_SIZE
                && r.positive_votes.len() == HELDOUT_SIZE
                && r.positive_votes.iter().all(|&v| v <= ENSEMBLE)
                && r.counts.total() == HELDOUT_SIZE,
            format!("round {}: {} heldout, {} vote counts", r.round, r.heldout_ids.len(), r.positive_votes.len()),
        );
    }
    let same = serde_json::to_vec(&a.report).expect("json") == serde_json::to_vec(&b.report).expect("json");
    check(same, "region-mean reports differ between runs".into());

    let strict = strict_deep_bow_config();
    let s1 = pipeline::run(&strict).expect("run");
    let s2 = pipeline::run(&strict).expect("run");
    let same = serde_json::to_vec(&s1.report).expect("json") == serde_json::to_vec(&s2.report).expect("json");
    check(same, "strict deep-bow reports differ between runs".into());
    let detail = if notes.is_empty() {
        format!(
            "3 CV reports with {CV_REPEATS} stratified {CV_VALIDATION}-subject splits; heldout {} rounds x {HELDOUT_SIZE} with {ENSEMBLE}-model vote (accuracy {:.3}); reruns byte-identical",
            h.rounds.len(),
            h.mean_accuracy
        )
    } else {
        notes.join("; ")
    };
    (ok, detail)
}

/// Deep-bow CV with the auto-encoder retrained inside every repeat, on a
/// reduced training budget.
fn strict_deep_bow_config() -> PipelineConfig {
    let mut c = PipelineConfig {
        family: Family::DeepBow,
        protocol: Protocol::Cv,
        cae: CaeSettings {
            epochs: 1,
            max_patches: Some(500),
            ..CaeSettings::default()
        },
        ..PipelineConfig::default()
    };
    c.eval.repeats = 10;
    c.eval.strict_leakage = true;
    c
}

fn leakage_audit(shared: &mut Shared) -> (bool, String) {
    let raw = shared.family_run(Family::RawBow);
    let raw_cv = raw.report.cv.as_ref().expect("cv");
    let raw_v = eval::audit_cv(&raw.fit_log.records(), raw_cv).len();
    let raw_n = raw.fit_log.records().len();

    let strict = pipeline::run(&strict_deep_bow_config()).expect("strict run");
    let strict_v = eval::audit_cv(&strict.fit_log.records(), strict.report.cv.as_ref().expect("cv")).len();
    let strict_n = strict.fit_log.records().len();

    let shared_run = shared.family_run(Family::DeepBow);
    let shared_v = eval::audit_cv(&shared_run.fit_log.records(), shared_run.report.cv.as_ref().expect("cv")).len();
    (
        raw_v == 0 && strict_v == 0,
        format!(
            "raw-bow full CV: {raw_v} violations in {raw_n} fit calls; strict deep-bow: {strict_v} in {strict_n}; \
             default deep-bow shares one auto-encoder across repeats ({shared_v} flagged, by design)"
        ),
    )
}
