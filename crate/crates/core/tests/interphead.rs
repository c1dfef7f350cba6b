mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use patternlens::featenc::FeatureVector;
use patternlens::interphead::*;
use patternlens::patterns::PatternId;
use patternlens::synthgen::{Benchmark, SyntheticSpec};
use patternlens::util::sigmoid as lib_sigmoid;

fn rule_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        label_rules: vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]],
        n_patients: 600,
        ..spec(64, 8, 3000, 0.0, seed)
    }
}

fn head_inputs(b: &Benchmark) -> (Vec<FeatureVector>, Vec<PatternId>, Vec<Vec<Option<bool>>>, Vec<String>) {
    let fvs = planted_features(b);
    let ids: Vec<PatternId> = (0..b.truth.dictionary.len() as PatternId).collect();
    let labels = b
        .dataset
        .records
        .iter()
        .map(|r| r.labels.iter().map(|l| l.as_bool()).collect())
        .collect();
    (fvs, ids, labels, b.dataset.manifest.label_names.clone())
}

fn fit(b: &Benchmark, alpha: f64) -> HeadModel {
    let (fvs, ids, labels, names) = head_inputs(b);
    let cfg = HeadConfig {
        alpha,
        ..HeadConfig::default()
    };
    train_head(&fvs, &ids, &labels, &names, &cfg).unwrap()
}

fn train_accuracy(head: &HeadModel, b: &Benchmark, t: usize) -> f64 {
    let fvs = planted_features(b);
    let hits = fvs
        .iter()
        .zip(&b.dataset.records)
        .filter(|(fv, r)| (head.predict(fv, t).unwrap() >= 0.5) == r.labels[t].as_bool().unwrap())
        .count();
    hits as f64 / fvs.len() as f64
}

#[test]
fn huge_alpha_zeroes_every_weight() {
    let b = split_benchmark(&rule_spec(1), [0.8, 0.1, 0.1]);
    let head = fit(&b, 1e3);
    for (t, th) in head.targets.iter().enumerate() {
        assert!(th.weights.iter().all(|&w| w == 0.0));
        let fv = &planted_features(&b)[0];
        assert_eq!(head.predict(fv, t).unwrap(), lib_sigmoid(th.bias));
    }
}

#[test]
fn unregularized_head_separates_planted_rules() {
    let b = split_benchmark(&rule_spec(2), [0.8, 0.1, 0.1]);
    let (fvs, ids, _, _) = head_inputs(&b);
    let xs: Vec<Vec<f64>> = fvs.iter().map(|f| dense(f, &ids)).collect();
    let head = fit(&b, 0.0);
    for t in 0..3 {
        let ys: Vec<bool> = b
            .dataset
            .records
            .iter()
            .map(|r| r.labels[t].as_bool().unwrap())
            .collect();
        let (w, b0) = gd_logistic(&xs, &ys, 2000, 8.0);
        assert!(accuracy(&xs, &ys, &w, b0) >= 0.99, "oracle cannot separate target {t}");
        let acc = train_accuracy(&head, &b, t);
        assert!(acc >= 0.99, "target {t}: {acc}");
    }
}

#[test]
fn default_alpha_keeps_few_weights() {
    let b = split_benchmark(&rule_spec(3), [0.8, 0.1, 0.1]);
    let head = fit(&b, 0.01);
    for th in &head.targets {
        assert!(th.nonzero() <= 20, "{}: {} weights", th.name, th.nonzero());
        assert!(th.converged);
    }
}

#[test]
fn sparsity_is_monotone_in_alpha() {
    let b = split_benchmark(&rule_spec(4), [0.8, 0.1, 0.1]);
    let counts: Vec<Vec<usize>> = [0.001, 0.01, 0.1, 1.0]
        .iter()
        .map(|&a| fit(&b, a).targets.iter().map(|t| t.nonzero()).collect())
        .collect();
    for t in 0..3 {
        for w in counts.windows(2) {
            assert!(w[1][t] <= w[0][t], "{counts:?}");
        }
    }
}

#[test]
fn full_batch_solver_agrees_with_saga() {
    let b = split_benchmark(&rule_spec(5), [0.8, 0.1, 0.1]);
    let (fvs, ids, labels, names) = head_inputs(&b);
    let saga = fit(&b, 0.01);
    let cfg = HeadConfig {
        solver: Solver::FullBatch,
        max_passes: 20_000,
        ..HeadConfig::default()
    };
    let fb = train_head(&fvs, &ids, &labels, &names, &cfg).unwrap();
    let rows: Vec<SparseRow> = fvs
        .iter()
        .map(|f| f.entries.iter().map(|&(id, v)| (id as usize, v)).collect())
        .collect();
    for t in 0..3 {
        let ys: Vec<bool> = labels.iter().map(|l| l[t].unwrap()).collect();
        let (a, c) = (&saga.targets[t], &fb.targets[t]);
        let f_saga = objective(&a.weights, a.bias, &rows, &ys, a.class_weights, 0.01);
        let f_fb = objective(&c.weights, c.bias, &rows, &ys, c.class_weights, 0.01);
        assert!((f_saga - f_fb).abs() < 1e-4, "target {t}: {f_saga} vs {f_fb}");
    }
}

fn random_problem(rng: &mut ChaCha8Rng) -> (Vec<SparseRow>, Vec<bool>, usize) {
    let dim = rng.random_range(1..12);
    let n = rng.random_range(2..30);
    let mut rows: Vec<SparseRow> = vec![Vec::new(); n];
    for row in &mut rows {
        for j in 0..dim {
            if rng.random_bool(0.5) {
                row.push((j, rng.random_range(-2.0..2.0)));
            }
        }
    }
    let mut ys: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    ys[0] = true;
    ys[1] = false;
    (rows, ys, dim)
}

#[test]
fn smooth_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let (rows, ys, dim) = random_problem(&mut rng);
        let cw = class_weights("t", &ys).unwrap();
        let mut point: Vec<f64> = (0..=dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        point[dim] = rng.random_range(-1.0..1.0);
        let (_, gw, gb) = smooth_loss_and_grad(&point[..dim], point[dim], &rows, &ys, cw);
        let analytic: Vec<f64> = gw.into_iter().chain([gb]).collect();
        let fd = central_diff(&point, 1e-5, |p| {
            smooth_loss_and_grad(&p[..dim], p[dim], &rows, &ys, cw).0
        });
        let err = rel_err(&analytic, &fd);
        assert!(err <= 1e-5, "relative gradient error {err}");
    }
}

fn random_head(rng: &mut ChaCha8Rng, p: usize) -> HeadModel {
    HeadModel {
        pattern_ids: (0..p as PatternId).map(|i| 3 * i + 1).collect(),
        alpha: 0.01,
        targets: vec![TargetHead {
            name: "t".into(),
            weights: (0..p)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        0.0
                    } else {
                        rng.random_range(-3.0..3.0)
                    }
                })
                .collect(),
            bias: rng.random_range(-2.0..2.0),
            class_weights: (1.0, 1.0),
            passes: 1,
            converged: true,
            skipped: None,
        }],
    }
}

fn random_fv(rng: &mut ChaCha8Rng, ids: &[PatternId]) -> FeatureVector {
    FeatureVector {
        record_id: "r".into(),
        entries: ids
            .iter()
            .filter_map(|&id| rng.random_bool(0.4).then_some(id))
            .collect::<Vec<_>>()
            .into_iter()
            .map(|id| (id, rng.random_range(1e-3..1.0)))
            .collect(),
        normalized: false,
    }
}

#[test]
fn predict_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..500 {
        let p = rng.random_range(1..40);
        let head = random_head(&mut rng, p);
        let fv = random_fv(&mut rng, &head.pattern_ids);
        let x = dense(&fv, &head.pattern_ids);
        let t = &head.targets[0];
        let z = t.bias + x.iter().zip(&t.weights).map(|(a, w)| a * w).sum::<f64>();
        assert!((head.predict(&fv, 0).unwrap() - sigmoid(z)).abs() <= 1e-12);
    }
}

#[test]
fn empty_features_give_the_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = random_head(&mut rng, 5);
    let empty = FeatureVector {
        record_id: "r".into(),
        entries: vec![],
        normalized: false,
    };
    assert_eq!(head.predict(&empty, 0).unwrap(), lib_sigmoid(head.targets[0].bias));
    let r = head.attribute(&empty, 0, None).unwrap();
    assert!(r.contributions.is_empty());
    assert_eq!(r.logit, head.targets[0].bias);

    let mut zero = head.clone();
    zero.targets[0].weights.iter_mut().for_each(|w| *w = 0.0);
    zero.targets[0].bias = 0.0;
    assert_eq!(zero.predict(&random_fv(&mut rng, &head.pattern_ids), 0).unwrap(), 0.5);
    assert!(head.predict(&empty, 1).is_err());
    assert!(head.target_index("nope").is_err());
}

proptest! {
    #[test]
    fn attribution_is_complete_and_sorted(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.random_range(1..40);
        let head = random_head(&mut rng, p);
        let fv = random_fv(&mut rng, &head.pattern_ids);
        let r = head.attribute(&fv, 0, None).unwrap();
        prop_assert_eq!(r.reconstructed_logit() - r.logit, 0.0);
        prop_assert_eq!(r.probability, head.predict(&fv, 0).unwrap());
        prop_assert_eq!(r.contributions.len(), fv.nnz());
        for c in &r.contributions {
            prop_assert_eq!(c.contribution, c.weight * c.activation);
        }
        for w in r.contributions.windows(2) {
            let (a, b) = (w[0].contribution.abs(), w[1].contribution.abs());
            prop_assert!(a > b || (a == b && w[0].pattern_id < w[1].pattern_id));
        }
    }

    #[test]
    fn soft_threshold_is_a_contraction(w in -1e6f64..1e6, lambda in 0.0f64..1e6) {
        let s = soft_threshold(w, lambda);
        prop_assert!(s.abs() <= w.abs());
        prop_assert!(s == 0.0 || s.signum() == w.signum());
        prop_assert!((s.abs() - (w.abs() - lambda).max(0.0)).abs() <= 1e-9 * w.abs().max(1.0));
    }
}

#[test]
fn single_class_targets_are_skipped() {
    let fvs = vec![
        FeatureVector {
            record_id: "a".into(),
            entries: vec![(0, 1.0)],
            normalized: true,
        },
        FeatureVector {
            record_id: "b".into(),
            entries: vec![(1, 1.0)],
            normalized: true,
        },
    ];
    let labels = vec![vec![Some(true), Some(true)], vec![Some(false), Some(true)]];
    let head = train_head(
        &fvs,
        &[0, 1],
        &labels,
        &["mixed".into(), "all_pos".into()],
        &HeadConfig::default(),
    )
    .unwrap();
    assert!(head.targets[0].skipped.is_none());
    assert!(head.targets[1].skipped.as_deref().unwrap().contains("all_pos"));
    assert!(head.targets[1].weights.iter().all(|&w| w == 0.0));
}

#[test]
fn saved_head_roundtrips() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let head = random_head(&mut rng, 12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.json");
    head.save(&path).unwrap();
    assert_eq!(HeadModel::load(&path).unwrap(), head);
}
