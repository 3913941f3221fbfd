use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use deepbow::cae::{self, AutoEncoder, Batch, CaeArch};
use deepbow::dataio::Label;
use deepbow::eval::{confusion_counts, confusion_metrics, stratified_split};
use deepbow::learn::{forward_select, kernel_from_sq_dists, kkt_violations, solve_dual, sq_dists, SelectionConfig, SmoConfig};
use deepbow::seed;

fn labels_from(bits: &[bool]) -> Vec<Label> {
    bits.iter().map(|&b| if b { Label::Patient } else { Label::Control }).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reconstruction_shape_and_loss(seed_value in any::<u64>(), n in 1usize..4, stacked in any::<bool>()) {
        let arch = CaeArch { size: 8, channels: if stacked { 2 } else { 1 }, widths: vec![2, 3, 3, 4] };
        let model = AutoEncoder::<f64>::init(arch, seed_value).unwrap();
        let len = 64 * if stacked { 2 } else { 1 };
        let mut rng = seed::rng(seed_value);
        let values: Vec<f64> = (0..n * len).map(|_| rng.sample(StandardNormal)).collect();
        let batch = Batch::new(n, len, values).unwrap();
        let out = model.forward(&batch).unwrap();
        prop_assert_eq!(out.reconstructions.len(), batch.values.len());
        prop_assert_eq!(out.latents.len(), n * 4);
        prop_assert!(cae::loss(&out.reconstructions, &batch).unwrap() >= 0.0);
        prop_assert_eq!(cae::loss(&batch.values, &batch).unwrap(), 0.0);
        let mut off = batch.values.clone();
        let j = rng.gen_range(0..off.len());
        off[j] += 1e-3;
        prop_assert!(cae::loss(&off, &batch).unwrap() > 0.0);
    }

    #[test]
    fn accuracy_is_mean_correctness(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let pred = labels_from(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let truth = labels_from(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let counts = confusion_counts(&pred, &truth).unwrap();
        prop_assert_eq!(counts.total(), pairs.len());
        let correct = pairs.iter().filter(|p| p.0 == p.1).count() as f64 / pairs.len() as f64;
        let acc = confusion_metrics(&pred, &truth).unwrap().accuracy.unwrap();
        prop_assert!((acc - correct).abs() < 1e-15);
    }

    #[test]
    fn splits_are_stratified(n_pos in 2usize..80, n_neg in 2usize..80, frac in 0.1f64..0.5, s in any::<u64>()) {
        let mut labels = vec![Label::Patient; n_pos];
        labels.extend(vec![Label::Control; n_neg]);
        let n = labels.len();
        let held = ((n as f64 * frac).round() as usize).clamp(2, n - 2);
        let (train, val) = stratified_split(&labels, held, s).unwrap();
        prop_assert_eq!(val.len(), held);
        prop_assert_eq!(train.len() + val.len(), n);
        let pos = val.iter().filter(|&&i| labels[i].is_positive()).count() as f64;
        prop_assert!((pos - held as f64 * n_pos as f64 / n as f64).abs() <= 1.0);
        let neg = held as f64 - pos;
        prop_assert!((neg - held as f64 * n_neg as f64 / n as f64).abs() <= 1.0);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn dual_is_feasible_and_kkt_holds(s in any::<u64>(), n in 4usize..30, c in 0.05f64..50.0, g in 0.05f64..2.0) {
        let mut rng = seed::rng(s);
        let x = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let mut y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        y[0] = 1.0;
        y[1] = -1.0;
        let k = kernel_from_sq_dists(&sq_dists(x.view(), x.view()), g);
        let cfg = SmoConfig::default();
        let sol = solve_dual(&k, &y, c, cfg.tol, 100_000).unwrap();
        prop_assert!(sol.converged);
        prop_assert!(sol.alpha.iter().all(|&a| (-1e-8..=c + 1e-8).contains(&a)));
        let eq: f64 = sol.alpha.iter().zip(&y).map(|(a, b)| a * b).sum();
        prop_assert!(eq.abs() <= 1e-8);
        prop_assert_eq!(kkt_violations(&k, &y, &sol.alpha, sol.bias, c, cfg.tol), 0);
    }
}

#[test]
fn selection_is_deterministic() {
    let mut rng = seed::rng(11);
    let n = 40;
    let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let x = Array2::from_shape_fn((n, 6), |(i, j)| {
        rng.sample::<f64, _>(StandardNormal) + if j == 2 { 3.0 * y[i] } else { 0.0 }
    });
    let names: Vec<String> = (0..6).map(|j| format!("f{j}")).collect();
    let cfg = SelectionConfig {
        budget: 3,
        ..SelectionConfig::default()
    };
    let a = forward_select(x.view(), &y, &names, &cfg, 5, &SmoConfig::default()).unwrap();
    let b = forward_select(x.view(), &y, &names, &cfg, 5, &SmoConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.selected[0], 2);
}
