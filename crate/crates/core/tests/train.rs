mod common;

use resiter::autodiff::{Tape, Tensor};
use resiter::data::{synthetic_clusters, Dataset, Split};
use resiter::nn::{build_model, Model};
use resiter::train::{evaluate, lr_at, train_epoch, Augment, LrStep, OptimizerState, TrainConfig};

fn two_gaussians(seed: u64) -> Dataset {
    let mut ds = synthetic_clusters(100, 2, [6, 1, 1], 3.0, seed).unwrap();
    ds.standardize();
    ds
}

fn config(epochs: usize, seed: u64, augment: Augment) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 20,
        momentum: 0.9,
        lr_schedule: vec![LrStep { until_epoch: None, lr: 0.05 }],
        augment,
        seed,
    }
}

fn fit(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Vec<f64> {
    let mut st = OptimizerState::new(model.params());
    (0..cfg.epochs)
        .map(|e| train_epoch(model, data, cfg, &mut st, e).unwrap().train_loss)
        .collect()
}

#[test]
fn paper_schedule_lookup() {
    let sched = [
        LrStep { until_epoch: Some(40), lr: 0.1 },
        LrStep { until_epoch: Some(60), lr: 0.02 },
        LrStep { until_epoch: Some(80), lr: 0.004 },
        LrStep { until_epoch: None, lr: 0.0008 },
    ];
    assert_eq!(lr_at(&sched, 50), 0.02);
    assert_eq!(lr_at(&sched, 0), 0.1);
    assert_eq!(lr_at(&sched, 80), 0.0008);
    assert_eq!(lr_at(&sched, 1000), 0.0008);
}

#[test]
fn tiny_net_fits_two_gaussians() {
    let data = two_gaussians(1);
    let cfg = config(30, 0, Augment::default());
    let mut model = build_model(&common::single_repr([6, 1, 1], 2, 8, 2), 0).unwrap();
    let mut st = OptimizerState::new(model.params());
    let mut best: f64 = 0.0;
    for e in 0..cfg.epochs {
        best = best.max(train_epoch(&mut model, &data, &cfg, &mut st, e).unwrap().train_acc);
        if best >= 0.95 {
            break;
        }
    }
    assert!(best >= 0.95, "{best}");
}

#[test]
fn loss_decreases_for_every_seed() {
    for seed in 0..4 {
        let data = two_gaussians(10 + seed);
        let mut model = build_model(&common::single_repr([6, 1, 1], 2, 8, 2), seed).unwrap();
        let losses = fit(&mut model, &data, &config(6, seed, Augment::default()));
        assert!(losses[5] < losses[0], "seed {seed}: {losses:?}");
    }
}

#[test]
fn repeated_training_is_bit_identical() {
    let (train, _) = common::grating_splits(8, 1);
    let cfg_model = common::single_repr([3, 10, 10], 2, 4, 8);
    for augment in [Augment::default(), Augment { flip: true, translate_pixels: 2 }] {
        let run = || {
            let mut m = build_model(&cfg_model, 5).unwrap();
            fit(&mut m, &train, &config(2, 7, augment));
            m.params().snapshot().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run(), "{augment:?}");
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let empty = Dataset::new(Tensor::zeros([0, 6, 1, 1]), vec![], Split::Train, 2).unwrap();
    let mut model = build_model(&common::single_repr([6, 1, 1], 1, 4, 2), 0).unwrap();
    let mut st = OptimizerState::new(model.params());
    assert!(train_epoch(&mut model, &empty, &config(1, 0, Augment::default()), &mut st, 0).is_err());
}

#[test]
fn uniform_logits_give_chance_accuracy_and_log_k_loss() {
    let k = 4;
    let data = synthetic_clusters(50, k, [6, 1, 1], 1.0, 3).unwrap();
    let mut model = build_model(&common::single_repr([6, 1, 1], 1, 4, k), 0).unwrap();
    let (w, b) = (model.head().fc_weight, model.head().fc_bias);
    for id in [w, b] {
        model.params_mut().value_mut(id).data_mut().fill(0.0);
    }
    let ev = evaluate(&model, &data, 32).unwrap();
    assert!((ev.loss - (k as f64).ln()).abs() < 1e-12);
    assert!((ev.accuracy - 1.0 / k as f64).abs() < 0.1);
    for i in 0..data.len() {
        assert!((ev.probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn cross_entropy_matches_hand_computation() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 0.5, 0.5, -1.0]).unwrap()).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &[2, 0]).unwrap();
    let l0 = -(3.0f64.exp() / (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp())).ln();
    let l1 = -(0.5f64.exp() / (2.0 * 0.5f64.exp() + (-1.0f64).exp())).ln();
    assert!((loss.per_sample[0] - l0).abs() < 1e-12);
    assert!((loss.per_sample[1] - l1).abs() < 1e-12);
    assert!((tape.value(loss.total).data()[0] - 0.5 * (l0 + l1)).abs() < 1e-12);
}
