mod common;

use proptest::prelude::*;
use rand::Rng;

use spmim::eval::gradcam::cam_from;
use spmim::eval::{classification_metrics, evaluate};
use spmim::rng::rng_from_seed;
use spmim::{
    auc_binary, compute_metrics, cross_validate, gradcam, quadratic_kappa, Classifier, ClassifierSpec, Error,
    PredictionSet, Tensor,
};

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = rng_from_seed(0);
    for _ in 0..1000 {
        let k = rng.random_range(2..6);
        let n = rng.random_range(2..30);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let m = classification_metrics(&labels, &preds, k).unwrap();
        let (acc, wf1) = common::f1_oracle(&labels, &preds, k);
        assert!((m.accuracy - acc).abs() <= 1e-12);
        assert!((m.weighted_f1 - wf1).abs() <= 1e-12);
        match (quadratic_kappa(&labels, &preds, k), common::kappa_oracle(&labels, &preds, k)) {
            (Ok(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "{a} vs {b}"),
            (Err(Error::UndefinedKappa(_)), None) => {}
            other => panic!("kappa disagreement {other:?}"),
        }
        // Coarse scores produce plenty of ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 0).collect();
        if pos.iter().any(|&p| p) && pos.iter().any(|&p| !p) {
            assert!((auc_binary(&scores, &pos).unwrap() - common::auc_oracle(&scores, &pos)).abs() <= 1e-12);
        }
    }
}

fn onehot_set(labels: &[usize], preds: &[usize], k: usize) -> PredictionSet {
    let probs = preds.iter().map(|&p| (0..k).map(|c| if c == p { 1.0 } else { 0.0 }).collect()).collect();
    PredictionSet::new(probs, labels.to_vec(), k).unwrap()
}

#[test]
fn metric_examples() {
    let all = onehot_set(&[0, 1, 2, 1], &[0, 1, 2, 1], 3);
    let m = compute_metrics(&all).unwrap();
    assert_eq!((m.accuracy, m.weighted_f1), (1.0, 1.0));
    let wrong = onehot_set(&[0, 1, 0, 1], &[1, 0, 1, 0], 2);
    let m = compute_metrics(&wrong).unwrap();
    assert_eq!((m.accuracy, m.weighted_f1), (0.0, 0.0));
    assert!(compute_metrics(&PredictionSet::new(vec![], vec![], 2).unwrap()).is_err());

    assert_eq!(quadratic_kappa(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
    assert_eq!(quadratic_kappa(&[0, 0, 1, 1], &[1, 1, 0, 0], 2).unwrap(), -1.0);
    let shifted = quadratic_kappa(&[0, 1, 2, 3], &[1, 2, 3, 3], 4).unwrap();
    assert!((shifted - common::kappa_oracle(&[0, 1, 2, 3], &[1, 2, 3, 3], 4).unwrap()).abs() <= 1e-12);
    assert!(matches!(quadratic_kappa(&[1, 1], &[1, 1], 3), Err(Error::UndefinedKappa(_))));

    let pos = [false, false, true, true];
    assert_eq!(auc_binary(&[0.1, 0.2, 0.8, 0.9], &pos).unwrap(), 1.0);
    assert_eq!(auc_binary(&[0.9, 0.8, 0.2, 0.1], &pos).unwrap(), 0.0);
    assert_eq!(auc_binary(&[0.3; 4], &pos).unwrap(), 0.5);
    assert!(auc_binary(&[0.1, 0.2], &[true, true]).is_err());

    let bad = PredictionSet::new(vec![vec![0.7, 0.7]], vec![0], 2);
    assert!(bad.is_err());
}

proptest! {
    #[test]
    fn auc_is_invariant_to_monotone_maps(raw in prop::collection::vec((0u8..10, any::<bool>()), 2..40)) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64).collect();
        let pos: Vec<bool> = raw.iter().map(|(_, p)| *p).collect();
        prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
        let base = auc_binary(&scores, &pos).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (0.3 * s).exp() - 7.0).collect();
        prop_assert_eq!(auc_binary(&mapped, &pos).unwrap(), base);
    }

    #[test]
    fn kappa_is_symmetric(pairs in prop::collection::vec((0usize..4, 0usize..4), 2..30)) {
        let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        match (quadratic_kappa(&a, &b, 4), quadratic_kappa(&b, &a, 4)) {
            (Ok(x), Ok(y)) => {
                prop_assert!((x - y).abs() <= 1e-12);
                let distinct = a.iter().any(|&v| v != a[0]);
                if distinct {
                    prop_assert_eq!(x == 1.0, a == b);
                }
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "asymmetric failure"),
        }
    }
}

#[test]
fn cross_validation_aggregates_folds() {
    let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let constant = |_: &[usize], val: &[usize], _: u64| {
        let probs = val.iter().map(|_| vec![0.6, 0.4]).collect();
        PredictionSet::new(probs, val.iter().map(|&i| labels[i]).collect(), 2)
    };
    let report = cross_validate(&labels, 5, 1, constant).unwrap();
    assert_eq!(report.folds.len(), 5);
    assert_eq!(report.mean.accuracy, 0.5);
    assert_eq!(report.mean.auc, 0.5);
    assert_eq!(report.std.accuracy, 0.0);

    let mut rng_seen = Vec::new();
    let noisy = |_: &[usize], val: &[usize], s: u64| {
        rng_seen.push(s);
        let mut rng = rng_from_seed(s);
        let probs = val
            .iter()
            .map(|_| {
                let p: f64 = rng.random();
                vec![p, 1.0 - p]
            })
            .collect();
        PredictionSet::new(probs, val.iter().map(|&i| labels[i]).collect(), 2)
    };
    let a = cross_validate(&labels, 5, 9, noisy).unwrap();
    let mean = a.folds.iter().map(|m| m.kappa).sum::<f64>() / 5.0;
    assert!((a.mean.kappa - mean).abs() <= 1e-12);
    let mean_f1 = a.folds.iter().map(|m| m.weighted_f1).sum::<f64>() / 5.0;
    assert!((a.mean.weighted_f1 - mean_f1).abs() <= 1e-12);
    let seeds = rng_seen.clone();
    rng_seen.clear();
    let noisy_again = |_: &[usize], val: &[usize], s: u64| {
        let mut rng = rng_from_seed(s);
        let probs = val
            .iter()
            .map(|_| {
                let p: f64 = rng.random();
                vec![p, 1.0 - p]
            })
            .collect();
        PredictionSet::new(probs, val.iter().map(|&i| labels[i]).collect(), 2)
    };
    assert_eq!(cross_validate(&labels, 5, 9, noisy_again).unwrap(), a);
    assert_eq!(seeds.len(), 5);

    let reversed = |_: &[usize], val: &[usize], _: u64| {
        let probs = val.iter().map(|_| vec![0.5, 0.5]).collect();
        PredictionSet::new(probs, val.iter().rev().map(|&i| labels[i]).collect(), 2)
    };
    assert!(cross_validate(&labels, 5, 1, reversed).is_err());
}

#[test]
fn cam_formula_examples() {
    let act = Tensor::new(vec![1, 2, 2], vec![-1.0, 0.5, 2.0, 1.0]).unwrap();
    let grad = Tensor::full(&[1, 2, 2], 1.0);
    let cam = cam_from(&act, &grad).unwrap();
    assert_eq!(cam.data(), &[0.0, 0.25, 1.0, 0.5]);
    let zero = cam_from(&act, &Tensor::zeros(&[1, 2, 2])).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

fn classifier() -> (Classifier, spmim::ParamStore) {
    let spec = ClassifierSpec { encoder: common::micro_encoder(), num_classes: 3, head_dropout: 0.0 };
    Classifier::build(&spec, 4).unwrap()
}

#[test]
fn gradcam_properties() {
    let (model, mut store) = classifier();
    let img = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng_from_seed(2));
    for scale in 1..=5 {
        let h = gradcam(&model, &store, &img, 1, scale).unwrap();
        assert_eq!(h.map.shape(), &[64, 64]);
        assert!(h.map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let max = h.map.data().iter().copied().fold(0.0, f64::max);
        assert!(max == 1.0 || max == 0.0);
    }
    assert!(gradcam(&model, &store, &img, 1, 0).is_err());
    assert!(gradcam(&model, &store, &img, 1, 6).is_err());
    assert!(gradcam(&model, &store, &img, 3, 5).is_err());

    // Biases of other classes do not reach the target logit's gradient.
    let base = gradcam(&model, &store, &img, 0, 5).unwrap();
    let mut bias = store.get(model.head.bias).clone();
    bias.data_mut()[1] += 3.0;
    bias.data_mut()[2] -= 1.5;
    store.set(model.head.bias, bias).unwrap();
    assert_eq!(gradcam(&model, &store, &img, 0, 5).unwrap(), base);

    let zeros = Tensor::zeros(store.get(model.head.weight).shape());
    store.set(model.head.weight, zeros).unwrap();
    for scale in 1..=5 {
        let h = gradcam(&model, &store, &img, 0, scale).unwrap();
        assert!(h.map.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn evaluate_reports_all_four() {
    let set = PredictionSet::new(
        vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.6, 0.4], vec![0.1, 0.9]],
        vec![0, 1, 1, 1],
        2,
    )
    .unwrap();
    let m = evaluate(&set).unwrap();
    assert_eq!(m.accuracy, 0.75);
    assert_eq!(m.auc, 1.0);
    assert!((m.kappa - common::kappa_oracle(&[0, 1, 1, 1], &[0, 1, 0, 1], 2).unwrap()).abs() <= 1e-12);
}
