mod common;

use lmar::trainer::{
    cosine_pair_loss, cosine_pair_loss_grad, evidence_embedding, holdout_split, train_stage, triplet_loss,
    triplet_loss_grad, AdapterParams, Dataset, Sample, Stage, StopReason, TrainConfig, TrainError,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::random_unit;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

/// Central differences of `f` over every weight.
fn numeric_grad(params: &AdapterParams, f: impl Fn(&AdapterParams) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut p = params.clone();
    (0..params.w.len())
        .map(|i| {
            let w0 = p.w[i];
            p.w[i] = w0 + h;
            let up = f(&p);
            p.w[i] = w0 - h;
            let down = f(&p);
            p.w[i] = w0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn triplet_at(params: &AdapterParams, a: &[f64], p: &[f64], n: &[f64]) -> f64 {
    triplet_loss(
        &params.apply(a).unwrap(),
        &params.apply(p).unwrap(),
        &params.apply(n).unwrap(),
        1.0,
        2,
    )
    .unwrap()
}

fn pair_at(params: &AdapterParams, q: &[f64], ev: &[&[f64]], y: f64, s: f64) -> f64 {
    let qa = params.apply(q).unwrap();
    let e = evidence_embedding(params, ev).unwrap();
    cosine_pair_loss(&qa, &e, y, s, 0.0).unwrap()
}

fn instance(seed: u64, d: usize) -> (AdapterParams, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AdapterParams::init(d, 0.3, seed);
    let vs = (0..6).map(|_| random_unit(&mut rng, d)).collect();
    (params, vs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn triplet_gradient_matches_differences(seed in any::<u64>(), d in 2usize..7) {
        let (params, v) = instance(seed, d);
        let (loss, g) = triplet_loss_grad(&params, &v[0], &v[1], &v[2], 1.0, 2).unwrap();
        prop_assert!((loss - triplet_at(&params, &v[0], &v[1], &v[2])).abs() < 1e-12);
        // Skip instances sitting on the hinge.
        let a = params.apply(&v[0]).unwrap();
        let dist = |x: &[f64]| {
            let y = params.apply(x).unwrap();
            a.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
        };
        prop_assume!((dist(&v[1]) - dist(&v[2]) + 1.0).abs() > 1e-3);
        let num = numeric_grad(&params, |p| triplet_at(p, &v[0], &v[1], &v[2]));
        if loss == 0.0 {
            prop_assert!(g.iter().all(|x| *x == 0.0));
        } else {
            prop_assert!(rel_err(&g, &num) < 1e-5, "rel err {}", rel_err(&g, &num));
        }
    }

    #[test]
    fn pair_gradient_matches_differences(seed in any::<u64>(), d in 2usize..7, positive in any::<bool>(), s in 0.1f64..1.0) {
        let (params, v) = instance(seed, d);
        let ev: Vec<&[f64]> = v[1..4].iter().map(|x| x.as_slice()).collect();
        let y = if positive { 1.0 } else { -1.0 };
        let (loss, g) = cosine_pair_loss_grad(&params, &v[0], &ev, y, s, 0.0).unwrap();
        prop_assert!((loss - pair_at(&params, &v[0], &ev, y, s)).abs() < 1e-12);
        if !positive {
            let cos = 1.0 - pair_at(&params, &v[0], &ev, 1.0, 1.0);
            prop_assume!(cos.abs() > 1e-3);
        }
        let num = numeric_grad(&params, |p| pair_at(p, &v[0], &ev, y, s));
        if loss == 0.0 {
            prop_assert!(g.iter().all(|x| *x == 0.0));
        } else {
            prop_assert!(rel_err(&g, &num) < 1e-5, "rel err {}", rel_err(&g, &num));
        }
    }

    #[test]
    fn grade_only_weights_positive_pairs(seed in any::<u64>(), s1 in 0.0f64..1.0, s2 in 0.0f64..1.0) {
        let (params, v) = instance(seed, 4);
        let ev: Vec<&[f64]> = vec![&v[1], &v[2]];
        let a = cosine_pair_loss_grad(&params, &v[0], &ev, -1.0, s1, 0.0).unwrap();
        let b = cosine_pair_loss_grad(&params, &v[0], &ev, -1.0, s2, 0.0).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn zero_grade_positive_has_no_gradient() {
    let (params, v) = instance(3, 5);
    let ev: Vec<&[f64]> = vec![&v[1]];
    let (loss, g) = cosine_pair_loss_grad(&params, &v[0], &ev, 1.0, 0.0, 0.0).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.iter().all(|x| *x == 0.0));
}

#[test]
fn pair_loss_hand_values() {
    // cos = 0.25 between [1, 0] and [0.25, sqrt(1 - 0.0625)].
    let q = [1.0, 0.0];
    let e = [0.25, (1.0f64 - 0.0625).sqrt()];
    assert!((cosine_pair_loss(&q, &e, 1.0, 0.8, 0.0).unwrap() - 0.6).abs() < 1e-12);
    let e = [0.5, 0.75f64.sqrt()];
    assert!((cosine_pair_loss(&q, &e, -1.0, 0.3, 0.0).unwrap() - 0.5).abs() < 1e-12);
    // Below the margin a negative pair costs nothing.
    assert_eq!(cosine_pair_loss(&q, &[-1.0, 0.0], -1.0, 1.0, 0.0).unwrap(), 0.0);
}

#[test]
fn triplet_loss_hand_values() {
    let a = [1.0, 0.0];
    let p = [1.0, 0.0];
    let n = [0.0, 1.0];
    // 0 - sqrt(2) + 1 is below zero.
    assert_eq!(triplet_loss(&a, &p, &n, 1.0, 2).unwrap(), 0.0);
    assert!((triplet_loss(&a, &n, &p, 1.0, 2).unwrap() - (2f64.sqrt() + 1.0)).abs() < 1e-12);
    assert!(triplet_loss(&a, &[1.0], &n, 1.0, 2).is_err());
}

fn triplet_samples(seed: u64, count: usize, d: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Sample::Triplet {
            anchor: random_unit(&mut rng, d),
            positive: random_unit(&mut rng, d),
            negative: random_unit(&mut rng, d),
        })
        .collect()
}

fn config(lr: f64) -> TrainConfig {
    TrainConfig {
        triplet_lr: lr,
        qe_lr: lr,
        batch_size: 4,
        max_epochs: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_returns_best_epoch() {
    let ds = Dataset {
        train: triplet_samples(1, 40, 6),
        val: triplet_samples(2, 10, 6),
    };
    let init = AdapterParams::init(6, 1e-3, 7);
    let c = config(1e-2);
    let (p1, r1) = train_stage(Stage::Triplet, &ds, &c, &init).unwrap();
    let (p2, r2) = train_stage(Stage::Triplet, &ds, &c, &init).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(r1, r2);
    assert_eq!(r1.val_losses.len(), r1.stop_epoch + 1);
    assert_eq!(r1.train_losses.len(), r1.stop_epoch);
    let best = r1.val_losses.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(r1.val_losses[r1.best_epoch], best);
    let mut cfg = c.clone();
    cfg.rng_seed = 99;
    let (p3, _) = train_stage(Stage::Triplet, &ds, &cfg, &init).unwrap();
    assert_ne!(p1, p3, "the shuffle seed changes the batch order");
}

#[test]
fn stalled_validation_stops_after_patience() {
    // Anchor equals positive and negative is opposite: the hinge never fires.
    let s = || Sample::Triplet {
        anchor: vec![1.0, 0.0],
        positive: vec![1.0, 0.0],
        negative: vec![-1.0, 0.0],
    };
    let ds = Dataset {
        train: vec![s(), s(), s()],
        val: vec![s()],
    };
    let mut c = config(1e-2);
    c.weight_decay = 0.0;
    c.max_epochs = 30;
    let init = AdapterParams::identity(2);
    let (p, r) = train_stage(Stage::Triplet, &ds, &c, &init).unwrap();
    assert_eq!(r.stop_reason, StopReason::Patience);
    assert_eq!(r.stop_epoch, c.patience);
    assert_eq!(r.best_epoch, 0);
    assert_eq!(p, init);
}

#[test]
fn runaway_weights_are_reported() {
    let ds = Dataset {
        train: triplet_samples(3, 8, 3),
        val: triplet_samples(4, 4, 3),
    };
    let c = config(f64::INFINITY);
    let err = train_stage(Stage::Triplet, &ds, &c, &AdapterParams::identity(3)).unwrap_err();
    assert!(matches!(err, TrainError::DivergenceDetected { epoch: 1, .. }), "{err:?}");
}

#[test]
fn empty_or_invalid_inputs_fail() {
    let ds = Dataset {
        train: triplet_samples(3, 8, 3),
        val: vec![],
    };
    let id = AdapterParams::identity(3);
    assert!(matches!(
        train_stage(Stage::Qe, &ds, &config(1e-3), &id),
        Err(TrainError::EmptyDataset(_))
    ));
    let mut bad = config(1e-3);
    bad.patience = 0;
    assert!(matches!(
        train_stage(Stage::Qe, &ds, &bad, &id),
        Err(TrainError::InvalidConfig(_))
    ));
}

#[test]
fn holdout_split_is_a_seeded_partition() {
    for n in [2, 3, 10, 101] {
        let (t, v) = holdout_split(n, 0.3, 5);
        assert_eq!(holdout_split(n, 0.3, 5), (t.clone(), v.clone()));
        let mut all = [t.clone(), v.clone()].concat();
        all.sort();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert!(!t.is_empty() && !v.is_empty());
        assert_eq!(v.len(), ((0.3 * n as f64).round() as usize).clamp(1, n - 1));
    }
    assert_eq!(holdout_split(1, 0.3, 5), (vec![0], vec![]));
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapter.lmad");
    let params = AdapterParams::init(5, 0.1, 11);
    let trailer = serde_json::json!({"stage": "triplet", "epoch": 4});
    params.save(&path, &trailer).unwrap();
    let (back, t) = AdapterParams::load(&path).unwrap();
    assert_eq!(back, params);
    assert_eq!(t, trailer);

    let bytes = std::fs::read(&path).unwrap();
    assert!(AdapterParams::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] ^= 0xff;
    assert!(AdapterParams::from_bytes(&wrong_magic).is_err());
    assert!(AdapterParams::load(&dir.path().join("missing.lmad")).is_err());
}

#[test]
fn adapter_output_is_unit_norm() {
    let params = AdapterParams::init(8, 0.5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let v = params.apply(&random_unit(&mut rng, 8)).unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(params.apply(&[1.0; 3]).is_err());
}
