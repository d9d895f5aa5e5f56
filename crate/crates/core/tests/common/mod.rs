#![allow(dead_code)]

use resiter::cli::{DataConfig, DataSource, ExperimentConfig, ProbeSettings};
use resiter::data::{Dataset, Split, SyntheticKind, SyntheticSpec};
use resiter::nn::{ArchitectureConfig, Family, Model, ShortcutKind, StageSpec};
use resiter::probes::ProbeKind;
use resiter::train::{evaluate, train_epoch, Augment, LrStep, OptimizerState, TrainConfig};

pub struct Trained {
    pub model: Model,
    pub train: Dataset,
    pub val: Dataset,
    pub val_acc: f64,
}

pub fn single_repr(input: [usize; 3], blocks: usize, channels: usize, classes: usize) -> ArchitectureConfig {
    let mut c = ArchitectureConfig::desk(Family::SingleRepr);
    c.input_shape = input;
    c.stages = vec![StageSpec { blocks, channels }];
    c.stem_channels = channels;
    c.num_classes = classes;
    c.shortcut = ShortcutKind::None;
    c
}

fn schedule(epochs: usize, lrs: [f64; 3]) -> Vec<LrStep> {
    vec![
        LrStep { until_epoch: Some(epochs * 6 / 10), lr: lrs[0] },
        LrStep { until_epoch: Some(epochs * 8 / 10), lr: lrs[1] },
        LrStep { until_epoch: None, lr: lrs[2] },
    ]
}

fn fit(model: &mut Model, train: &Dataset, cfg: &TrainConfig) {
    let mut st = OptimizerState::new(model.params());
    for e in 0..cfg.epochs {
        train_epoch(model, train, cfg, &mut st, e).unwrap();
    }
}

/// Oriented-grating task where only local texture identifies the class.
/// Horizontal flips would map orientation θ to π−θ and relabel examples,
/// so augmentation stays off.
pub fn grating_splits(n_per_class: usize, val_per_class: usize) -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        kind: SyntheticKind::Gratings,
        n_per_class,
        class_count: 8,
        image_shape: [3, 10, 10],
        separation: 0.35,
        seed: 100,
    };
    let mut train = spec.generate(Split::Train).unwrap();
    let norm = train.standardize();
    let mut val = SyntheticSpec {
        n_per_class: val_per_class,
        ..spec
    }
    .generate(Split::Val)
    .unwrap();
    val.normalize_with(&norm);
    (train, val)
}

/// The convolutional single-representation stand-in: 8 blocks of 12 channels.
pub fn trained_grating_model(seed: u64) -> Trained {
    let (train, val) = grating_splits(250, 100);
    let cfg = single_repr([3, 10, 10], 8, 12, 8);
    let mut model = resiter::nn::build_model(&cfg, seed).unwrap();
    let tc = TrainConfig {
        epochs: 8,
        batch_size: 32,
        momentum: 0.9,
        lr_schedule: schedule(8, [0.05, 0.01, 0.002]),
        augment: Augment::default(),
        seed,
    };
    fit(&mut model, &train, &tc);
    let val_acc = evaluate(&model, &val, 100).unwrap().accuracy;
    Trained { model, train, val, val_acc }
}

/// Gaussian blobs presented as C×1×1 images.
pub fn blob_splits(n_per_class: usize) -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        kind: SyntheticKind::Blobs,
        n_per_class,
        class_count: 4,
        image_shape: [16, 1, 1],
        separation: 3.0,
        seed: 100,
    };
    let mut train = spec.generate(Split::Train).unwrap();
    let norm = train.standardize();
    let mut val = spec.generate(Split::Val).unwrap();
    val.normalize_with(&norm);
    (train, val)
}

/// Dense-stem single-representation model (8 blocks of 16 channels on 16×1×1 inputs).
pub fn trained_dense_model(seed: u64) -> Trained {
    let (train, val) = blob_splits(200);
    let cfg = single_repr([16, 1, 1], 8, 16, 4);
    let mut model = resiter::nn::build_model(&cfg, seed).unwrap();
    let tc = TrainConfig {
        epochs: 10,
        batch_size: 32,
        momentum: 0.9,
        lr_schedule: vec![LrStep { until_epoch: Some(5), lr: 0.05 }, LrStep { until_epoch: None, lr: 0.005 }],
        augment: Augment::default(),
        seed,
    };
    fit(&mut model, &train, &tc);
    let val_acc = evaluate(&model, &val, 100).unwrap().accuracy;
    Trained { model, train, val, val_acc }
}

/// A run config that trains in well under a second.
pub fn smoke_config(run_id: &str) -> ExperimentConfig {
    ExperimentConfig {
        run_id: run_id.to_string(),
        output_dir: None,
        architecture: single_repr([3, 8, 8], 3, 6, 4),
        train: TrainConfig {
            epochs: 2,
            batch_size: 16,
            momentum: 0.9,
            lr_schedule: vec![LrStep { until_epoch: Some(1), lr: 0.05 }, LrStep { until_epoch: None, lr: 0.01 }],
            augment: Augment {
                flip: false,
                translate_pixels: 1,
            },
            seed: 3,
        },
        sharing: None,
        unroll: None,
        probes: ProbeSettings {
            enabled: ProbeKind::ALL.to_vec(),
            max_samples: Some(64),
            ..Default::default()
        },
        data: DataConfig {
            source: DataSource::Synthetic,
            path: None,
            idx: None,
            synthetic: Some(SyntheticSpec {
                kind: SyntheticKind::Gratings,
                n_per_class: 16,
                class_count: 4,
                image_shape: [3, 8, 8],
                separation: 0.8,
                seed: 5,
            }),
            train_subset: None,
            val_subset: None,
            test_subset: None,
            seed: 0,
        },
    }
}
