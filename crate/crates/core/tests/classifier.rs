//! Noisy-OR pooling, classifier losses and the auxiliary head.

use diffvp::autograd::{Graph, ParamStore, Tensor};
use diffvp::classifier::{noisy_or_pool, train_classifier, Classifier, ClassifierConfig};
use diffvp::data::{Dataset, Split, SynthConfig, NUM_CLASSES};
use diffvp::nn::bce_with_logits;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn product_oracle(p: &[f32]) -> f64 {
    1.0 - p.iter().map(|&x| 1.0 - x as f64).product::<f64>()
}

proptest! {
    #[test]
    fn pooling_is_monotone_in_every_cell(p in prop::collection::vec(0.0f32..=1.0, 1..40), at in any::<prop::sample::Index>(), up in 0.0f32..=1.0) {
        let i = at.index(p.len());
        let mut q = p.clone();
        q[i] = q[i].max(up);
        prop_assert!(noisy_or_pool(&q) >= noisy_or_pool(&p));
    }

    #[test]
    fn pooling_ignores_cell_order(p in prop::collection::vec(0.0f32..=1.0, 1..40), seed in 0u64..1000) {
        let mut q = p.clone();
        rand::seq::SliceRandom::shuffle(&mut q[..], &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((noisy_or_pool(&q) - noisy_or_pool(&p)).abs() <= 1e-6);
    }

    #[test]
    fn pooling_matches_the_direct_product(p in prop::collection::vec(0.0f32..0.99, 1..40)) {
        let got = noisy_or_pool(&p) as f64;
        prop_assert!((0.0..=1.0).contains(&got));
        prop_assert!((got - product_oracle(&p)).abs() < 1e-6);
    }
}

#[test]
fn pooling_examples() {
    assert!((noisy_or_pool(&[0.5, 0.5]) - 0.75).abs() < 1e-7);
    assert_eq!(noisy_or_pool(&[0.0]), 0.0);
    assert!(noisy_or_pool(&[1.0, 0.2]) > 1.0 - 1e-6);
    let ten = noisy_or_pool(&[0.1; 10]) as f64;
    assert!((ten - product_oracle(&[0.1; 10])).abs() < 1e-6);
    assert!((ten - 0.6513).abs() < 1e-4);
}

fn small_cfg() -> ClassifierConfig {
    ClassifierConfig {
        channels: [2, 4, 8],
        ..ClassifierConfig::default()
    }
}

fn dataset(n_train: usize, n_test: usize) -> Dataset {
    Dataset::synthesize(&SynthConfig {
        n_train,
        n_test,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn first_batch_loss_matches_a_scalar_oracle() {
    let ds = dataset(8, 2);
    let cfg = small_cfg();
    let mut store = ParamStore::new();
    let model = Classifier::new(&mut store, &cfg);
    let batch: Vec<_> = ds.split(Split::Train).take(cfg.batch_size).collect();
    let mut got = 0.0f64;
    let mut expect = 0.0f64;
    for c in &batch {
        let mut g = Graph::new();
        let l = model.loss(&mut g, &store, c.volume.voxels(), &c.labels).unwrap();
        got += g.value(l)[0] as f64;

        let mut g = Graph::new();
        let z = model.voxel_logits(&mut g, &store, c.volume.voxels()).unwrap();
        let z = g.value(z);
        for k in 0..NUM_CLASSES {
            let none: f64 = z.iter().skip(k).step_by(NUM_CLASSES).map(|&v| 1.0 - sigmoid(v as f64)).product();
            let p = (1.0 - none).clamp(1e-7, 1.0 - 1e-7);
            let y = c.labels[k] as f64;
            expect -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
    }
    let b = batch.len() as f64;
    let got = got / b;
    let expect = expect / (b * NUM_CLASSES as f64);
    assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
}

#[test]
fn logits_have_one_row_per_grid_cell() {
    let mut store = ParamStore::new();
    let model = Classifier::new(&mut store, &small_cfg());
    let mut g = Graph::new();
    let z = model.voxel_logits(&mut g, &store, &vec![0.0; 16 * 32 * 32]).unwrap();
    assert_eq!(g.shape(z), &[64, 18]);
    assert!(g.value(z).iter().all(|v| v.is_finite()));
    assert!(model.voxel_logits(&mut g, &store, &[0.0; 10]).is_err());
}

#[test]
fn predictions_are_probabilities_and_repeatable() {
    let ds = dataset(12, 4);
    let train: Vec<_> = ds.split(Split::Train).collect();
    let cfg = ClassifierConfig { epochs: 1, ..small_cfg() };
    let (cls, log) = train_classifier(&train, &cfg).unwrap();
    assert_eq!(log.len(), 1);
    for c in ds.cases() {
        let a = cls.predict(&c.volume).unwrap();
        assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(a, cls.predict(&c.volume).unwrap());
    }
    let mut with_test = train.clone();
    with_test.push(ds.split(Split::Test).next().unwrap());
    assert_eq!(train_classifier(&with_test, &cfg).unwrap_err().kind(), "leakage");
}

/// Fraction of (positive, negative) pairs ranked correctly; ties count half.
fn rank_accuracy(scores: &[(f32, bool)]) -> Option<f64> {
    let pos: Vec<f32> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f32> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut hits = 0.0;
    for &p in &pos {
        for &n in &neg {
            hits += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    Some(hits / (pos.len() * neg.len()) as f64)
}

#[test]
fn classifier_ranks_held_out_training_cases() {
    let ds = dataset(300, 2);
    let train: Vec<_> = ds.split(Split::Train).collect();
    let (fit, held) = train.split_at(200);
    let (cls, log) = train_classifier(fit, &ClassifierConfig::default()).unwrap();
    assert!(log.last() < log.first(), "{log:?}");
    let preds: Vec<_> = held.iter().map(|c| cls.predict(&c.volume).unwrap()).collect();
    let good = (0..NUM_CLASSES)
        .filter(|&k| {
            let s: Vec<_> = held.iter().zip(&preds).map(|(c, p)| (p[k], c.labels[k] == 1)).collect();
            rank_accuracy(&s).is_some_and(|a| a > 0.8)
        })
        .count();
    assert!(good >= 14, "{good} of 18 classes above 0.8");
}

fn bce_oracle(z: &[f32], y: &[f32]) -> f64 {
    let n = z.len() as f64;
    -z.iter()
        .zip(y)
        .map(|(&z, &y)| {
            let p = sigmoid(z as f64);
            y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / n
}

fn bce(z: &[f32], y: &[f32]) -> f32 {
    let mut g = Graph::new();
    let zv = g.input(Tensor::new(vec![1, z.len()], z.to_vec()).unwrap());
    let l = bce_with_logits(&mut g, zv, y).unwrap();
    g.value(l)[0]
}

#[test]
fn auxiliary_bce_limits_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let y: Vec<f32> = (0..NUM_CLASSES).map(|_| rng.gen_range(0..2) as f32).collect();
    assert!((bce(&[0.0; NUM_CLASSES], &y) as f64 - std::f64::consts::LN_2).abs() < 1e-6);
    let perfect: Vec<f32> = y.iter().map(|&t| if t == 1.0 { 50.0 } else { -50.0 }).collect();
    assert!(bce(&perfect, &y) < 1e-6);
    for _ in 0..20 {
        let z: Vec<f32> = (0..NUM_CLASSES).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let y: Vec<f32> = (0..NUM_CLASSES).map(|_| rng.gen_range(0..2) as f32).collect();
        let (got, want) = (bce(&z, &y) as f64, bce_oracle(&z, &y));
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}
