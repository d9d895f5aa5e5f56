mod common;

use rand::Rng as _;

use resiter::autodiff::Tensor;
use resiter::cli::{model_param_gradcheck, unroll_rows};
use resiter::nn::{build_model, ArchitectureConfig, Family, ForwardOptions, Mode, Model};
use resiter::probes::Group;
use resiter::rng;
use resiter::share_unroll::{
    activation_explosion_probe, build_shared_model, unroll_last_block, ShareBnMode, SharingSpec, UnrollSpec,
};
use resiter::train::evaluate;

fn input(model: &Model, n: usize, seed: u64) -> Tensor {
    let [c, h, w] = model.config().input_shape;
    let mut r = rng::stream(seed, &[]);
    Tensor::from_fn([n, c, h, w], |_| r.random_range(-1.0..1.0))
}

fn spec(from: usize, mode: ShareBnMode) -> SharingSpec {
    SharingSpec {
        share_from_block: vec![from],
        bn_mode: mode,
        gamma_init_shared: if mode == ShareBnMode::UbnFull { 0.1 } else { 1.0 },
    }
}

#[test]
fn shared_weights_alias_every_application() {
    let cfg = common::single_repr([2, 5, 5], 5, 4, 3);
    let mut model = build_shared_model(&cfg, &spec(2, ShareBnMode::UbnFull), 1).unwrap();
    assert_eq!(model.stages()[0].blocks.len(), 3);
    let x = input(&model, 3, 2);
    let before = model.forward_collect(&x, Mode::Eval).unwrap();
    let shared = model.stages()[0].blocks[2].conv2.weight;
    model.params_mut().value_mut(shared).data_mut()[0] += 0.5;
    let after = model.forward_collect(&x, Mode::Eval).unwrap();
    for b in 0..5 {
        let changed = before.f[b].data() != after.f[b].data();
        assert_eq!(changed, b >= 2, "block {b}");
    }
}

#[test]
fn shared_gradients_accumulate_over_applications() {
    let cfg = common::single_repr([2, 4, 4], 4, 3, 3);
    for mode in [ShareBnMode::Naive, ShareBnMode::UnsharedStats, ShareBnMode::UbnFull] {
        let model = build_shared_model(&cfg, &spec(1, mode), 3).unwrap();
        let x = input(&model, 3, 4);
        for m in [Mode::Train, Mode::Eval] {
            let c = model_param_gradcheck(&model, &x, &[0, 1, 2], m, 6, 5).unwrap();
            assert!(c.rel_error <= 1e-4, "{mode:?} {m:?}: {:e}", c.rel_error);
        }
    }
}

#[test]
fn share_index_past_the_stage_is_rejected() {
    let cfg = common::single_repr([2, 4, 4], 4, 3, 3);
    assert!(build_shared_model(&cfg, &SharingSpec::naive(5), 0).is_err());
    let same = build_shared_model(&cfg, &SharingSpec::naive(4), 0).unwrap();
    assert_eq!(same.trainable_count(), build_model(&cfg, 0).unwrap().trainable_count());
}

#[test]
fn parameter_counts_are_monotone_in_bn_mode() {
    let mut cfg = ArchitectureConfig::desk(Family::Original);
    for s in cfg.stages.iter_mut() {
        s.blocks = 8;
    }
    let count = |m| cfg.parameter_count(Some(&spec(3, m))).unwrap().trainable;
    let plain = cfg.parameter_count(None).unwrap().trainable;
    let (naive, stats, full) = (count(ShareBnMode::Naive), count(ShareBnMode::UnsharedStats), count(ShareBnMode::UbnFull));
    assert!(naive <= stats && stats <= full && full < plain, "{naive} {stats} {full} {plain}");
    let built = build_shared_model(&cfg, &spec(3, ShareBnMode::UbnFull), 0).unwrap();
    assert_eq!(built.trainable_count(), full);
}

#[test]
fn unshared_growth_at_initialization_stays_small() {
    let cfg = ArchitectureConfig::desk(Family::Original);
    for seed in 0..10 {
        let model = build_model(&cfg, seed).unwrap();
        let x = input(&model, 8, 100 + seed);
        let rep = activation_explosion_probe(&model, &x, Mode::Train, &[0]).unwrap();
        assert!(rep.growth_factor < 3.0, "seed {seed}: {}", rep.growth_factor);
        assert_eq!(rep.norms.len(), model.num_blocks() + 1);
    }
}

#[test]
fn unrolling_contracts() {
    let dense = common::trained_dense_model(1);
    let base = &dense.model;
    let x = input(base, 20, 7);
    let logits = |m: &Model| {
        let p = m.forward(&x, Mode::Eval, &ForwardOptions::default()).unwrap();
        p.tape.value(p.logits).data().to_vec()
    };

    let zero = unroll_last_block(base, &UnrollSpec { extra_steps: 0, alpha: 0.5 }, &dense.train, 100).unwrap();
    assert_eq!(logits(base), logits(&zero));

    let s = UnrollSpec { extra_steps: 3, alpha: 0.5 };
    let a = unroll_last_block(base, &s, &dense.train, 100).unwrap();
    let b = unroll_last_block(base, &s, &dense.train, 100).unwrap();
    assert_eq!(a.num_blocks(), base.num_blocks() + 3);
    assert_eq!(logits(&a), logits(&b));
    assert_eq!(logits(&a), logits(&a));

    assert!(unroll_last_block(base, &UnrollSpec { extra_steps: 1, alpha: 0.0 }, &dense.train, 100).is_err());
}

#[test]
fn unroll_rows_cover_every_step_and_group() {
    let dense = common::trained_dense_model(1);
    let rows = unroll_rows(&dense.model, &UnrollSpec { extra_steps: 0, alpha: 0.5 }, &dense.train, &dense.val, 0.1, 100)
        .unwrap();
    let base = evaluate(&dense.model, &dense.val, 100).unwrap();
    let all = rows.iter().find(|r| r.group == Group::All).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(all.step, 0);
    assert_eq!(all.accuracy, Some(base.accuracy));
    assert!((all.loss.unwrap() - base.loss).abs() < 1e-12);

    let rows = unroll_rows(&dense.model, &UnrollSpec { extra_steps: 4, alpha: 0.5 }, &dense.train, &dense.train, 0.1, 100)
        .unwrap();
    let steps: Vec<usize> = rows.iter().filter(|r| r.group == Group::All).map(|r| r.step).collect();
    assert_eq!(steps, (0..=4).collect::<Vec<_>>());
    let border: Vec<f64> = rows
        .iter()
        .filter(|r| r.group == Group::Borderline)
        .filter_map(|r| r.accuracy)
        .collect();
    assert!(border[1..].iter().any(|&a| a >= border[0]), "{border:?}");
}

#[test]
fn vanishing_alpha_keeps_metrics_constant() {
    let dense = common::trained_dense_model(1);
    let rows = unroll_rows(&dense.model, &UnrollSpec { extra_steps: 3, alpha: 1e-12 }, &dense.train, &dense.val, 0.1, 100)
        .unwrap();
    let all: Vec<_> = rows.iter().filter(|r| r.group == Group::All).collect();
    for r in &all[1..] {
        assert_eq!(r.accuracy, all[0].accuracy);
        assert!((r.loss.unwrap() - all[0].loss.unwrap()).abs() < 1e-9);
        assert!((r.entropy.unwrap() - all[0].entropy.unwrap()).abs() < 1e-9);
    }
}
