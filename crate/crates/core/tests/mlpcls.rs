mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use patternlens::embedstore::Split;
use patternlens::mlpcls::*;
use patternlens::optim::cosine_lr;
use patternlens::synthgen::SyntheticSpec;

fn random_model(rng: &mut ChaCha8Rng) -> ClassifierModel {
    let shape = ClassifierShape {
        d_in: rng.random_range(2..8),
        h1: rng.random_range(2..10),
        h2: rng.random_range(2..8),
        n_out: rng.random_range(1..4),
    };
    let mut m = ClassifierModel::init(shape, DEFAULT_THETA, 0.3, rng).unwrap();
    // larger biases keep a healthy share of units above θ
    for r in [shape.b1(), shape.b2(), shape.b3()] {
        m.params[r].iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    m
}

#[test]
fn forward_matches_dense_oracle_and_is_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let m = random_model(&mut rng);
        let x: Vec<f64> = (0..m.shape.d_in).map(|_| rng.random_range(-100.0..100.0)).collect();
        let (logits, pen) = m.forward(&x, Mode::Eval, None).unwrap();
        assert!(logits.iter().chain(&pen).all(|v| v.is_finite()));
        let want = classifier_forward(&m, &x).logits;
        assert!(rel_err(&logits, &want) < 1e-12);
    }
}

#[test]
fn bce_matches_closed_form() {
    let want = (1.0 + (-10f64).exp()).ln();
    let got = bce_loss(&[10.0], &[1.0], &[true]).unwrap();
    assert!((got - want).abs() < 1e-12 * want);
    assert!((got - 4.5399e-5).abs() < 1e-9);
    for (z, y) in [(-800.0, 1.0), (800.0, 0.0), (0.3, 0.25), (-3.0, 0.0)] {
        let got = bce_loss(&[z], &[y], &[true]).unwrap();
        assert!((got - stable_bce(z, y)).abs() <= 1e-12 * got.abs().max(1.0), "{z} {y}");
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 20 {
        let m = random_model(&mut rng);
        let s = m.shape;
        let n = 4;
        // draw inputs until every hidden pre-activation sits clearly off θ
        let mut xs: Vec<Vec<f64>> = Vec::new();
        while xs.len() < n {
            let x: Vec<f64> = (0..s.d_in).map(|_| rng.random_range(-1.0..1.0)).collect();
            if threshold_margin(&m, &x) > 1e-3 {
                xs.push(x);
            }
        }
        let ys: Vec<f64> = (0..n * s.n_out).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut mask: Vec<bool> = (0..n * s.n_out).map(|_| rng.random_bool(0.8)).collect();
        mask[0] = true;
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let (loss, grad) = m.loss_and_grad(&refs, &ys, &mask, None).unwrap();
        let oracle_loss = |p: &[f64]| {
            let mut q = m.clone();
            q.params.copy_from_slice(p);
            let logits: Vec<f64> = xs.iter().flat_map(|x| classifier_forward(&q, x).logits).collect();
            bce_loss(&logits, &ys, &mask).unwrap()
        };
        assert!((loss - oracle_loss(&m.params)).abs() < 1e-12);
        let fd = central_diff(&m.params, 1e-6, oracle_loss);
        let err = rel_err(&grad, &fd);
        assert!(err <= 1e-4, "relative gradient error {err}");
        checked += 1;
    }
}

fn separable_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_factors: 16,
        k_true: 1,
        noise_sigma: 0.0,
        label_rules: vec![vec![0, 1], vec![5]],
        n_samples: 2000,
        n_patients: 400,
        ..spec(16, 1, 2000, 0.0, 13)
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        lr_max: 3e-3,
        epochs: 20,
        h1: 64,
        h2: 32,
        seed: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_labels_are_learned() {
    let b = split_benchmark(&separable_spec(), [0.7, 0.15, 0.15]);
    let ds = &b.dataset;
    let train = ds.indices_in(Split::Train);
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| ds.records[i].image_f64()).collect();
    // the oracle first: a linear separator exists for each label
    for t in 0..2 {
        let ys: Vec<bool> = train
            .iter()
            .map(|&i| ds.records[i].labels[t].as_bool().unwrap())
            .collect();
        let (w, b0) = gd_logistic(&xs, &ys, 3000, 4.0);
        assert!(
            accuracy(&xs, &ys, &w, b0) >= 0.99,
            "label {t} not separable by the oracle"
        );
    }
    let (model, history) = train_classifier(ds, &small_config()).unwrap();
    assert!(history.epochs.len() <= 20);
    let acc = mean_label_accuracy(&model, ds, Split::Val).unwrap();
    assert!(acc.iter().all(|&a| a >= 0.95), "{acc:?}");
}

#[test]
fn training_is_deterministic_and_returns_the_best_epoch() {
    let b = split_benchmark(&separable_spec(), [0.7, 0.15, 0.15]);
    let cfg = TrainConfig {
        lr_max: 0.05,
        patience: 2,
        ..small_config()
    };
    let (m1, h1) = train_classifier(&b.dataset, &cfg).unwrap();
    let (m2, h2) = train_classifier(&b.dataset, &cfg).unwrap();
    assert_eq!(m1.params, m2.params);
    assert_eq!(h1, h2);

    let best = h1.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(h1.best_val_loss, best);
    assert_eq!(h1.epochs[h1.best_epoch - 1].val_loss, best);
    if h1.stopped_early {
        let tail = &h1.epochs[h1.epochs.len() - cfg.patience..];
        assert!(tail.iter().all(|e| e.val_loss >= best));
    }
    // the returned snapshot is the best one, not the last one
    let val = b.dataset.indices_in(Split::Val);
    let (ys, mask) = b.dataset.label_matrix(&val, cfg.unknown_labels);
    let logits: Vec<f64> = val
        .iter()
        .flat_map(|&i| classifier_forward(&m1, &b.dataset.records[i].image_f64()).logits)
        .collect();
    let loss = bce_loss(&logits, &ys, &mask).unwrap();
    assert!((loss - best).abs() < 1e-9, "{loss} vs {best}");
}

#[test]
fn divergence_is_a_numeric_error() {
    let b = split_benchmark(&separable_spec(), [0.7, 0.15, 0.15]);
    let cfg = TrainConfig {
        lr_max: 1e300,
        weight_decay: 0.0,
        epochs: 3,
        patience: 3,
        ..small_config()
    };
    let e = train_classifier(&b.dataset, &cfg).unwrap_err();
    assert!(matches!(e, patternlens::Error::Numeric(_)), "{e}");
}

proptest! {
    #[test]
    fn cosine_lr_is_nonincreasing(total in 1u64..10_000, lr in 1e-6f64..1.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (s, t) = ((lo * total as f64) as u64, (hi * total as f64) as u64);
        prop_assert!(cosine_lr(t, total, lr) <= cosine_lr(s, total, lr));
        prop_assert!(cosine_lr(0, total, lr) == lr);
    }
}
