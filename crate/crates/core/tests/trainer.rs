use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use infodist::distilled_trainer::{train_on_ids, LossConfig, NegativeHinge};
use infodist::embedding_io::EmbeddingSet;
use infodist::eval_metrics::argmax;

/// Two classes in the plane split by the line x + y = 0 with a margin.
fn separable(seed: u64, count: usize) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    while records.len() < count {
        let x: f64 = rng.random_range(-3.0..3.0);
        let y: f64 = rng.random_range(-3.0..3.0);
        let s = x + y;
        if s.abs() < 1.0 {
            continue;
        }
        records.push((usize::from(s > 0.0), vec![x, y]));
    }
    EmbeddingSet::from_records(2, 2, records).unwrap()
}

/// Plain perceptron with bias; `Some(epochs)` once it makes a clean pass.
fn perceptron_converges(set: &EmbeddingSet) -> Option<usize> {
    let mut w = vec![0.0; set.dim + 1];
    for epoch in 0..1000 {
        let mut mistakes = 0;
        for item in &set.items {
            let y = if item.label == 1 { 1.0 } else { -1.0 };
            let act: f64 = w[0]
                + item
                    .vector
                    .iter()
                    .zip(&w[1..])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            if y * act <= 0.0 {
                mistakes += 1;
                w[0] += y;
                for (wk, xk) in w[1..].iter_mut().zip(&item.vector) {
                    *wk += y * xk;
                }
            }
        }
        if mistakes == 0 {
            return Some(epoch);
        }
    }
    None
}

fn train_accuracy(set: &EmbeddingSet, config: &LossConfig) -> f64 {
    let ids: Vec<usize> = (0..set.len()).collect();
    let model = train_on_ids(set, &ids, config).unwrap();
    let hits = set
        .items
        .iter()
        .filter(|item| argmax(&model.logits(&item.vector)) == item.label)
        .count();
    hits as f64 / set.len() as f64
}

#[test]
fn linearly_separable_data_is_fit_exactly() {
    for seed in 0..3 {
        let set = separable(seed, 200);
        assert!(perceptron_converges(&set).is_some());
        for hinge in [NegativeHinge::AsPrinted, NegativeHinge::AgainstBn] {
            let config = LossConfig {
                negative_hinge: hinge,
                learning_rate: 0.5,
                epochs: 200,
                seed,
                ..LossConfig::default()
            };
            assert_eq!(train_accuracy(&set, &config), 1.0, "seed {seed} {hinge:?}");
        }
    }
}

#[test]
fn zero_learning_rate_gives_the_zero_classifier() {
    let set = separable(1, 50);
    let ids: Vec<usize> = (0..50).collect();
    let config = LossConfig {
        learning_rate: 0.0,
        epochs: 3,
        ..LossConfig::default()
    };
    let model = train_on_ids(&set, &ids, &config).unwrap();
    assert!(model.weights.iter().chain(&model.bias).all(|&v| v == 0.0));
}

#[test]
fn training_is_bit_reproducible() {
    let set = separable(2, 120);
    let ids: Vec<usize> = (0..120).step_by(2).collect();
    let config = LossConfig {
        epochs: 20,
        batch_size: 16,
        seed: 9,
        ..LossConfig::default()
    };
    let a = train_on_ids(&set, &ids, &config).unwrap().encode();
    let b = train_on_ids(&set, &ids, &config).unwrap().encode();
    assert_eq!(a, b);
    let other = LossConfig { seed: 10, ..config };
    assert_ne!(a, train_on_ids(&set, &ids, &other).unwrap().encode());
}
