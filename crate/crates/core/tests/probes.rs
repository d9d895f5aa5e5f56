mod common;

use rand::Rng as _;

use resiter::autodiff::Tensor;
use resiter::data::{Split, SyntheticKind, SyntheticSpec};
use resiter::nn::{build_model, ArchitectureConfig, Family, Mode, Model};
use resiter::probes::{
    block_probes, block_vectors, borderline_split, cosine_rows, drop_block_eval, drop_scan,
    first_layer_gradient_step_check, grad_norm_ratio, intermediate_accuracy, l2_ratio_probe, l2_ratio_rows,
    taylor_residual_check, taylor_residuals, TAYLOR_SCALES,
};
use resiter::rng;
use resiter::train::evaluate;

fn small_model(seed: u64) -> Model {
    build_model(&common::single_repr([3, 6, 6], 4, 6, 3), seed).unwrap()
}

fn random_batch(model: &Model, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let [c, h, w] = model.config().input_shape;
    let mut r = rng::stream(seed, &[]);
    let x = Tensor::from_fn([n, c, h, w], |_| r.random_range(-1.0..1.0));
    let labels = (0..n).map(|_| r.random_range(0..model.config().num_classes)).collect();
    (x, labels)
}

fn state_bits(m: &Model) -> Vec<u64> {
    m.params().snapshot().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn injected_directions_recover_exact_cosines() {
    let model = small_model(1);
    let (x, labels) = random_batch(&model, 5, 2);
    let v = block_vectors(&model, &x, &labels).unwrap();
    for b in 0..model.num_blocks() {
        let g = &v.grad[b];
        let anti = Tensor::from_fn(g.shape().to_vec(), |i| -3.0 * g.data()[i]);
        let m = cosine_rows(&anti, g).unwrap();
        assert!((m.mean + 1.0).abs() < 1e-10, "block {b}");
        // Remove the gradient component of F per sample.
        let row = g.row_len();
        let f = &v.f[b];
        let mut orth = f.data().to_vec();
        for s in 0..g.batch() {
            let (gs, fs) = (g.row(s), f.row(s));
            let k = fs.iter().zip(gs).map(|(a, c)| a * c).sum::<f64>() / gs.iter().map(|c| c * c).sum::<f64>();
            for j in 0..row {
                orth[s * row + j] -= k * gs[j];
            }
        }
        let orth = Tensor::new(f.shape().to_vec(), orth).unwrap();
        assert!(cosine_rows(&orth, g).unwrap().mean.abs() < 1e-10, "block {b}");
    }
}

#[test]
fn l2_ratio_of_zero_block_and_identity_injection() {
    let mut model = small_model(3);
    let (x, labels) = random_batch(&model, 4, 4);
    let v = block_vectors(&model, &x, &labels).unwrap();
    assert!((l2_ratio_rows(&v.h[1], &v.h[1]).unwrap().mean - 1.0).abs() < 1e-12);
    model.zero_block_output(1).unwrap();
    assert_eq!(l2_ratio_probe(&model, &x, 1).unwrap().mean, 0.0);
}

#[test]
fn dropping_a_zero_block_keeps_accuracy() {
    let dense = common::trained_dense_model(0);
    let mut model = dense.model.clone();
    model.zero_block_output(3).unwrap();
    let base = evaluate(&model, &dense.val, 100).unwrap().accuracy;
    assert_eq!(drop_block_eval(&model, 3, &dense.val, 100).unwrap(), base);
    let scan = drop_scan(&dense.model, &dense.val, 100).unwrap();
    assert_eq!(scan.len(), dense.model.num_blocks());
    assert!(drop_block_eval(&dense.model, dense.model.num_blocks(), &dense.val, 100).is_err());
}

#[test]
fn trained_dense_model_probes() {
    let dense = common::trained_dense_model(0);
    let n = dense.model.num_blocks();
    let final_acc = evaluate(&dense.model, &dense.val, 100).unwrap().accuracy;
    assert_eq!(intermediate_accuracy(&dense.model, n - 1, &dense.val, 100).unwrap(), final_acc);
    assert!(final_acc >= intermediate_accuracy(&dense.model, 0, &dense.val, 100).unwrap());
    let groups = borderline_split(&dense.model, &dense.val, 0.1, 100).unwrap();
    assert!((groups.borderline.len() as f64) < 0.1 * dense.val.len() as f64);
    assert_eq!(groups.all, (0..dense.val.len()).collect::<Vec<_>>());
}

#[test]
fn intermediate_accuracy_outside_the_last_stage_is_rejected() {
    let mut cfg = ArchitectureConfig::desk(Family::Original);
    cfg.input_shape = [3, 8, 8];
    let model = build_model(&cfg, 0).unwrap();
    let data = SyntheticSpec {
        kind: SyntheticKind::Blobs,
        n_per_class: 3,
        class_count: 10,
        image_shape: [3, 8, 8],
        separation: 1.0,
        seed: 0,
    }
    .generate(Split::Val)
    .unwrap();
    assert!(intermediate_accuracy(&model, 0, &data, 10).is_err());
    assert!(intermediate_accuracy(&model, model.num_blocks() - 1, &data, 10).is_ok());
}

#[test]
fn random_model_is_near_chance() {
    let (_, val) = common::blob_splits(100);
    let model = build_model(&common::single_repr([16, 1, 1], 3, 8, 4), 9).unwrap();
    let acc = intermediate_accuracy(&model, 2, &val, 100).unwrap();
    assert!((acc - 0.25).abs() < 0.2, "{acc}");
}

#[test]
fn gradient_norm_ratio_at_initialization_is_bounded() {
    let cfg = ArchitectureConfig::desk(Family::Original);
    let data = SyntheticSpec {
        kind: SyntheticKind::Gratings,
        n_per_class: 2,
        class_count: 10,
        image_shape: [3, 32, 32],
        separation: 0.5,
        seed: 1,
    }
    .generate(Split::Train)
    .unwrap();
    let (x, labels) = data.gather(&(0..16).collect::<Vec<_>>());
    for seed in 0..10 {
        let rep = grad_norm_ratio(&build_model(&cfg, seed).unwrap(), &x, &labels, Mode::Eval).unwrap();
        assert!(rep.ratio.is_finite() && rep.ratio < 1e3, "seed {seed}: {}", rep.ratio);
    }
    let mut identity = build_model(&cfg, 0).unwrap();
    for b in 0..identity.num_blocks() {
        identity.zero_block_output(b).unwrap();
    }
    let rep = grad_norm_ratio(&identity, &x, &labels, Mode::Eval).unwrap();
    assert!(rep.ratio.is_finite() && !rep.vanished);
    let single = small_model(0);
    let (sx, sl) = random_batch(&single, 2, 0);
    assert!(grad_norm_ratio(&single, &sx, &sl, Mode::Eval).is_err());
}

#[test]
fn first_layer_step_edge_cases() {
    let model = build_model(&common::single_repr([5, 1, 1], 2, 4, 3), 2).unwrap();
    let x = Tensor::new([1, 5, 1, 1], vec![0.3, -1.0, 2.0, 0.1, 0.7]).unwrap();
    let c = first_layer_gradient_step_check(&model, &x, 1, 0.0, 0.0).unwrap();
    assert!(c.delta_h.data().iter().all(|&v| v == 0.0));
    assert!(c.predicted.data().iter().all(|&v| v == 0.0));

    let zero = Tensor::zeros([1, 5, 1, 1]);
    let c = first_layer_gradient_step_check(&model, &zero, 1, 1e-3, 0.0).unwrap();
    assert!(c.rel_error < 1e-9, "{}", c.rel_error);

    assert!(first_layer_gradient_step_check(&model, &x, 1, 1e-6, 0.9).is_err());
    let two = Tensor::zeros([2, 5, 1, 1]);
    assert!(first_layer_gradient_step_check(&model, &two, 1, 1e-6, 0.0).is_err());
}

#[test]
fn taylor_residual_vanishes_at_zero_scale() {
    assert_eq!(taylor_residuals(1.25, -0.5, &[(0.0, 1.25)]), vec![0.0]);
}

#[test]
fn probes_do_not_mutate_the_model() {
    let model = small_model(5);
    let before = state_bits(&model);
    let (x, labels) = random_batch(&model, 6, 6);
    let ds = resiter::data::Dataset::new(x.clone(), labels.clone(), Split::Val, 3).unwrap();
    block_probes(&model, &ds, 4).unwrap();
    drop_scan(&model, &ds, 4).unwrap();
    borderline_split(&model, &ds, 0.1, 4).unwrap();
    for b in 0..model.num_blocks() {
        taylor_residual_check(&model, &x, &labels, b, &TAYLOR_SCALES).unwrap();
    }
    assert_eq!(before, state_bits(&model));
}
