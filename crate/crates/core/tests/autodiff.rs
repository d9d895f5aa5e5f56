use approx::assert_relative_eq;
use rand::Rng as _;

use resiter::autodiff::{finite_diff_grad, relative_error, Conv2dAttrs, NormStats, Tape, Tensor};
use resiter::cli::block_input_gradcheck;
use resiter::nn::{build_model, ArchitectureConfig, Family, ShortcutKind, StageSpec};
use resiter::rng;
use resiter::Result;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[shape.len() as u64]);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

/// Loss of a two-layer dense classifier; inputs are [x, w1, w2].
fn dense_loss(tape: &mut Tape, vals: &[Tensor], grad: bool, labels: &[usize]) -> Result<(f64, Vec<resiter::autodiff::Var>)> {
    let vars: Vec<_> = vals.iter().map(|v| tape.leaf(v.clone(), grad)).collect::<Result<_>>()?;
    let a = tape.matmul(vars[0], vars[1])?;
    let a = tape.relu(a)?;
    let logits = tape.matmul(a, vars[2])?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let total = tape.value(loss.total).data()[0];
    if grad {
        tape.backward(&loss)?;
    }
    Ok((total, vars))
}

#[test]
fn two_layer_dense_net_matches_finite_differences() {
    let labels = [0, 2, 1, 2];
    let vals = vec![random(&[4, 5], 1), random(&[5, 7], 2), random(&[7, 3], 3)];
    let mut tape = Tape::new();
    let (_, vars) = dense_loss(&mut tape, &vals, true, &labels).unwrap();
    for k in 0..vals.len() {
        let analytic = tape.grad_wrt(vars[k]).unwrap();
        let numeric = finite_diff_grad(
            |t| {
                let mut v = vals.clone();
                v[k] = t.clone();
                Ok(dense_loss(&mut Tape::new(), &v, false, &labels)?.0)
            },
            &vals[k],
            1e-5,
        )
        .unwrap();
        let err = relative_error(analytic.data(), numeric.data());
        assert!(err <= 1e-4, "input {k}: {err:e}");
    }
}

fn conv_bn_relu(tape: &mut Tape, x: &Tensor, w: &Tensor, grad: bool) -> Result<(f64, resiter::autodiff::Var, resiter::autodiff::Var)> {
    let xv = tape.leaf(x.clone(), grad)?;
    let wv = tape.leaf(w.clone(), grad)?;
    let gamma = tape.constant(Tensor::new([3], vec![1.0, 0.7, 1.3])?)?;
    let beta = tape.constant(Tensor::new([3], vec![0.1, -0.2, 0.0])?)?;
    let c = tape.conv2d(xv, wv, None, Conv2dAttrs { stride: 1, padding: 1 })?;
    let (n, _) = tape.batch_norm(c, gamma, beta, 1e-5, NormStats::Batch)?;
    let r = tape.relu(n)?;
    let sq = tape.mul(r, r)?;
    let s = tape.sum(sq)?;
    let total = tape.value(s).data()[0];
    if grad {
        let loss = resiter::autodiff::LossValue::from_scalar(tape, s)?;
        tape.backward(&loss)?;
    }
    Ok((total, xv, wv))
}

#[test]
fn conv_batchnorm_relu_stack_matches_finite_differences() {
    let x = random(&[2, 2, 4, 4], 10);
    let w = random(&[3, 2, 3, 3], 11);
    let mut tape = Tape::new();
    let (_, xv, wv) = conv_bn_relu(&mut tape, &x, &w, true).unwrap();
    let gx = finite_diff_grad(|t| Ok(conv_bn_relu(&mut Tape::new(), t, &w, false)?.0), &x, 1e-5).unwrap();
    let gw = finite_diff_grad(|t| Ok(conv_bn_relu(&mut Tape::new(), &x, t, false)?.0), &w, 1e-5).unwrap();
    assert!(relative_error(tape.grad_wrt(xv).unwrap().data(), gx.data()) <= 1e-4);
    assert!(relative_error(tape.grad_wrt(wv).unwrap().data(), gw.data()) <= 1e-4);
}

#[test]
fn gradient_at_block_inputs_of_a_residual_net() {
    let mut cfg = ArchitectureConfig::desk(Family::SingleRepr);
    cfg.input_shape = [2, 6, 6];
    cfg.stages = vec![StageSpec { blocks: 3, channels: 4 }];
    cfg.stem_channels = 4;
    cfg.num_classes = 3;
    cfg.shortcut = ShortcutKind::None;
    let model = build_model(&cfg, 4).unwrap();
    let x = random(&[3, 2, 6, 6], 12);
    for block in 0..3 {
        let err = block_input_gradcheck(&model, &x, &[0, 1, 2], block).unwrap();
        assert!(err <= 1e-4, "block {block}: {err:e}");
    }
}

#[test]
fn half_squared_norm_has_gradient_equal_to_input() {
    let h = random(&[2, 3], 5);
    let mut tape = Tape::new();
    let v = tape.leaf(h.clone(), true).unwrap();
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq).unwrap();
    let half = tape.scale(s, 0.5).unwrap();
    let loss = resiter::autodiff::LossValue::from_scalar(&tape, half).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(tape.grad_wrt(v).unwrap().data(), h.data());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x = random(&[3, 4], 6);
    let w = random(&[4, 2], 7);
    let (alpha, beta) = (0.7, -1.9);
    let grad_of = |a: f64, b: f64| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true).unwrap();
        let wv = tape.constant(w.clone()).unwrap();
        let y = tape.matmul(xv, wv).unwrap();
        let r = tape.relu(y).unwrap();
        let f = tape.sum(r).unwrap();
        let sq = tape.mul(xv, xv).unwrap();
        let g = tape.sum(sq).unwrap();
        let fa = tape.scale(f, a).unwrap();
        let gb = tape.scale(g, b).unwrap();
        let total = tape.add(fa, gb).unwrap();
        let loss = resiter::autodiff::LossValue::from_scalar(&tape, total).unwrap();
        tape.backward(&loss).unwrap();
        tape.grad_wrt(xv).unwrap()
    };
    let combined = grad_of(alpha, beta);
    let (gf, gg) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
    for i in 0..combined.len() {
        assert_relative_eq!(combined.data()[i], alpha * gf.data()[i] + beta * gg.data()[i], epsilon = 1e-10);
    }
}

#[test]
fn repeated_computation_is_bit_identical() {
    let vals = vec![random(&[4, 5], 1), random(&[5, 7], 2), random(&[7, 3], 3)];
    let run = || {
        let mut tape = Tape::new();
        let (loss, vars) = dense_loss(&mut tape, &vals, true, &[1, 1, 0, 2]).unwrap();
        let grads: Vec<u64> = vars
            .iter()
            .flat_map(|&v| tape.grad_wrt(v).unwrap().into_data())
            .map(f64::to_bits)
            .collect();
        (loss.to_bits(), grads)
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_total_is_mean_of_per_sample_losses() {
    let mut tape = Tape::new();
    let logits = tape.leaf(random(&[5, 4], 9), true).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &[0, 1, 2, 3, 0]).unwrap();
    let mean = loss.per_sample.iter().sum::<f64>() / 5.0;
    assert_relative_eq!(tape.value(loss.total).data()[0], mean, max_relative = 1e-12);
}
