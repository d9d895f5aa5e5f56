use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{check_primitive, relative_error, OpKind, Tensor};
use crate::nn::{ArchitectureConfig, Family, ForwardOptions, Mode, Model, StageSpec};
use crate::probes::{first_layer_gradient_step_check, taylor_residual_check, TAYLOR_SCALES};
use crate::rng::{stream, TAG_GRADCHECK};
use crate::share_unroll::{ShareBnMode, SharingSpec};
use crate::{Real, Result};

pub const GRADIENT_TOLERANCE: Real = 1e-4;
pub const STEP_IDENTITY_TOLERANCE: Real = 1e-6;
pub const TAYLOR_MIN_SLOPE: Real = 1.8;
pub const TAYLOR_MIN_FRACTION: Real = 0.9;
const FD_EPS: Real = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Spatial side of the model-level checks' inputs.
    pub image_size: usize,
    /// Parameter coordinates sampled per parameter tensor.
    pub coords_per_param: usize,
    /// (model, sample) pairs for the first-layer step identity.
    pub step_pairs: usize,
    /// Also check desk models at their full input resolution.
    pub full_resolution: bool,
    /// Test fixture: corrupt this op's backward rule in the primitive checks.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            image_size: 8,
            coords_per_param: 4,
            step_pairs: 10,
            full_resolution: true,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative error, or for the Taylor check the fraction of
    /// kink-free samples below the slope threshold.
    pub max_rel_error: Real,
    pub tolerance: Real,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub wall_seconds: Real,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

fn result(name: String, err: Real, tol: Real, detail: String) -> CheckResult {
    CheckResult {
        name,
        max_rel_error: err,
        tolerance: tol,
        passed: err <= tol && err.is_finite(),
        detail,
    }
}

/// Mean cross-entropy of a forward pass under `mode`.
fn loss_of(model: &Model, x: &Tensor, labels: &[usize], mode: Mode, opts: &ForwardOptions) -> Result<Real> {
    Ok(loss_and_pattern(model, x, labels, mode, opts, false)?.0)
}

fn loss_and_pattern(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    mode: Mode,
    opts: &ForwardOptions,
    record: bool,
) -> Result<(Real, Vec<bool>)> {
    let opts = ForwardOptions {
        record_relus: record,
        ..opts.clone()
    };
    let mut pass = model.forward(x, mode, &opts)?;
    let loss = pass.tape.softmax_cross_entropy(pass.logits, labels)?;
    let pattern = pass
        .relus
        .iter()
        .flat_map(|&r| pass.tape.value(r).data().iter().map(|&v| v > 0.0).collect::<Vec<_>>())
        .collect();
    Ok((pass.tape.value(loss.total).data()[0], pattern))
}

/// Outcome of a sampled parameter-gradient check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub rel_error: Real,
    pub used: usize,
    /// Coordinates whose ±eps perturbation flipped some ReLU, where central
    /// differences do not estimate the derivative.
    pub excluded: usize,
}

/// Relative error between backpropagated parameter gradients and central
/// differences, over `coords` sampled coordinates of every trainable tensor.
pub fn model_param_gradcheck(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    mode: Mode,
    coords: usize,
    seed: u64,
) -> Result<ParamCheck> {
    let opts = ForwardOptions {
        params_require_grad: true,
        ..Default::default()
    };
    let mut pass = model.forward(x, mode, &opts)?;
    let loss = pass.tape.softmax_cross_entropy(pass.logits, labels)?;
    pass.tape.backward(&loss)?;
    let grads: Vec<_> = pass
        .binder
        .bound_trainable(model.params())
        .map(|(id, v)| Ok((id, pass.tape.grad_wrt(v)?)))
        .collect::<Result<_>>()?;
    let mut probe = model.clone();
    let plain = ForwardOptions::default();
    let (mut analytic, mut numeric, mut excluded) = (Vec::new(), Vec::new(), 0);
    for (id, g) in grads {
        let mut r = stream(seed, &[TAG_GRADCHECK, 1000 + id.index() as u64]);
        for k in sample(&mut r, g.len(), coords.min(g.len())).into_vec() {
            let orig = probe.params().value(id).data()[k];
            probe.params_mut().value_mut(id).data_mut()[k] = orig + FD_EPS;
            let (up, p_up) = loss_and_pattern(&probe, x, labels, mode, &plain, true)?;
            probe.params_mut().value_mut(id).data_mut()[k] = orig - FD_EPS;
            let (down, p_down) = loss_and_pattern(&probe, x, labels, mode, &plain, true)?;
            probe.params_mut().value_mut(id).data_mut()[k] = orig;
            if p_up != p_down {
                excluded += 1;
                continue;
            }
            analytic.push(g.data()[k]);
            numeric.push((up - down) / (2.0 * FD_EPS));
        }
    }
    Ok(ParamCheck {
        rel_error: if analytic.is_empty() { Real::INFINITY } else { relative_error(&analytic, &numeric) },
        used: analytic.len(),
        excluded,
    })
}

/// Gradient of the loss at the residual stream after `block`, backpropagated
/// versus central differences on every coordinate.
pub fn block_input_gradcheck(model: &Model, x: &Tensor, labels: &[usize], block: usize) -> Result<Real> {
    let pass = model.forward(x, Mode::Eval, &ForwardOptions::default())?;
    let z = Tensor::from_fn(pass.tape.shape(pass.h(block)?).to_vec(), |i| {
        pass.tape.value(pass.h(block).expect("computed")).data()[i] + pass.tape.value(pass.f(block).expect("computed")).data()[i]
    });
    let at = |z: &Tensor| ForwardOptions {
        inject_after: Some((block, z.clone())),
        ..Default::default()
    };
    let mut p = model.forward(x, Mode::Eval, &at(&z))?;
    let loss = p.tape.softmax_cross_entropy(p.logits, labels)?;
    p.tape.backward(&loss)?;
    let analytic = p.tape.grad_wrt(p.injected.expect("injected leaf"))?;
    let numeric = crate::autodiff::finite_diff_grad(|z| loss_of(model, x, labels, Mode::Eval, &at(z)), &z, FD_EPS)?;
    Ok(relative_error(analytic.data(), numeric.data()))
}

fn shrink(mut c: ArchitectureConfig, size: usize, classes: usize) -> ArchitectureConfig {
    c.input_shape = [3, size, size];
    c.num_classes = classes;
    c
}

/// Desk-layout models (every family, plus a projection-shortcut network and
/// the three shared-block modes) at a reduced input resolution.
pub fn gradcheck_models(size: usize) -> Vec<(String, ArchitectureConfig, Option<SharingSpec>)> {
    let mut out: Vec<(String, ArchitectureConfig, Option<SharingSpec>)> = [
        (Family::Original, "original"),
        (Family::SingleRepr, "single_repr"),
        (Family::AvgPool, "avg_pool"),
        (Family::Wide, "wide"),
    ]
    .into_iter()
    .map(|(f, name)| (name.to_string(), shrink(ArchitectureConfig::desk(f), size, 4), None))
    .collect();
    let mut proj = shrink(ArchitectureConfig::desk(Family::Original), size, 4);
    proj.shortcut = crate::nn::ShortcutKind::Projection;
    proj.stages = vec![StageSpec { blocks: 1, channels: 4 }, StageSpec { blocks: 1, channels: 8 }];
    proj.stem_channels = 4;
    out.push(("projection".into(), proj, None));
    let mut shared = shrink(ArchitectureConfig::desk(Family::SingleRepr), size, 4);
    shared.stages = vec![StageSpec { blocks: 5, channels: 8 }];
    shared.stem_channels = 8;
    for (mode, name) in [
        (ShareBnMode::Naive, "naive"),
        (ShareBnMode::UnsharedStats, "unshared_stats"),
        (ShareBnMode::UbnFull, "ubn_full"),
    ] {
        let spec = SharingSpec {
            share_from_block: vec![2],
            bn_mode: mode,
            gamma_init_shared: if mode == ShareBnMode::UbnFull { 0.1 } else { 1.0 },
        };
        out.push((format!("shared_{name}"), shared.clone(), Some(spec)));
    }
    let mut three = shrink(ArchitectureConfig::desk(Family::Original), size, 4);
    three.stages = vec![StageSpec { blocks: 3, channels: 4 }, StageSpec { blocks: 3, channels: 6 }];
    three.stem_channels = 4;
    out.push((
        "shared_two_stage".into(),
        three,
        Some(SharingSpec {
            share_from_block: vec![1, 2],
            bn_mode: ShareBnMode::UbnFull,
            gamma_init_shared: 0.1,
        }),
    ));
    out
}

fn random_batch(seed: u64, tag: u64, shape: [usize; 3], n: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let mut r = stream(seed, &[TAG_GRADCHECK, tag]);
    let [c, h, w] = shape;
    let x = Tensor::from_fn([n, c, h, w], |_| r.random_range(-1.0..1.0));
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    (x, labels)
}

/// A dense-stem network (C×1×1 input), where the first layer sees the whole input.
pub fn dense_config(inputs: usize, channels: usize, blocks: usize, classes: usize) -> ArchitectureConfig {
    let mut c = ArchitectureConfig::desk(Family::SingleRepr);
    c.input_shape = [inputs, 1, 1];
    c.stages = vec![StageSpec { blocks, channels }];
    c.stem_channels = channels;
    c.num_classes = classes;
    c
}

/// The full finite-difference suite: every primitive, parameter gradients of
/// desk-layout models in training mode (including shared blocks, whose
/// gradient accumulates over applications), the gradient at a block input,
/// the first-layer step identity and Taylor convergence of the downstream
/// loss.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let t0 = Instant::now();
    let mut checks = Vec::new();
    for kind in OpKind::ALL {
        let c = check_primitive(kind, opts.seed, opts.fault)?;
        checks.push(result(format!("primitive:{kind}"), c.max_rel_error, GRADIENT_TOLERANCE, String::new()));
    }
    for (i, (name, cfg, sharing)) in gradcheck_models(opts.image_size).into_iter().enumerate() {
        let model = Model::build(&cfg, sharing.as_ref(), opts.seed.wrapping_add(i as u64))?;
        let (x, labels) = random_batch(opts.seed, 100 + i as u64, cfg.input_shape, 3, cfg.num_classes);
        let c = model_param_gradcheck(&model, &x, &labels, Mode::Train, opts.coords_per_param, opts.seed)?;
        let detail = format!("{} coordinates ({} crossed a kink)", c.used, c.excluded);
        checks.push(result(format!("model:{name}"), c.rel_error, GRADIENT_TOLERANCE, detail));
    }
    if opts.full_resolution {
        let desk = ArchitectureConfig::desk(Family::SingleRepr);
        let from = desk.stages[0].blocks * 3 / 8;
        for (name, sharing) in [("single_repr", None), ("single_repr_ubn_full", Some(SharingSpec::ubn(from)))] {
            let model = Model::build(&desk, sharing.as_ref(), opts.seed)?;
            let (x, labels) = random_batch(opts.seed, 150, desk.input_shape, 2, desk.num_classes);
            let c = model_param_gradcheck(&model, &x, &labels, Mode::Train, 2, opts.seed)?;
            let detail = format!(
                "{:?} input, {} coordinates ({} crossed a kink)",
                desk.input_shape, c.used, c.excluded
            );
            checks.push(result(format!("model:desk_{name}"), c.rel_error, GRADIENT_TOLERANCE, detail));
        }
    }
    {
        let cfg = shrink(ArchitectureConfig::desk(Family::SingleRepr), opts.image_size.min(6), 4);
        let mut cfg = cfg;
        cfg.stages = vec![StageSpec { blocks: 3, channels: 4 }];
        cfg.stem_channels = 4;
        let model = Model::build(&cfg, None, opts.seed)?;
        let (x, labels) = random_batch(opts.seed, 200, cfg.input_shape, 2, 4);
        let err = block_input_gradcheck(&model, &x, &labels, 1)?;
        checks.push(result("block_input_gradient".into(), err, GRADIENT_TOLERANCE, String::new()));
    }
    {
        let mut worst: Real = 0.0;
        for k in 0..opts.step_pairs {
            let cfg = dense_config(6, 5, 2, 3);
            let model = Model::build(&cfg, None, opts.seed.wrapping_add(300 + k as u64))?;
            let (x, labels) = random_batch(opts.seed, 300 + k as u64, cfg.input_shape, 1, 3);
            let c = first_layer_gradient_step_check(&model, &x, labels[0], 1e-6, 0.0)?;
            worst = worst.max(c.rel_error);
        }
        let detail = format!("{} (model, sample) pairs at eta = 1e-6", opts.step_pairs);
        checks.push(result("first_layer_step_identity".into(), worst, STEP_IDENTITY_TOLERANCE, detail));
    }
    {
        let cfg = dense_config(8, 8, 4, 3);
        let model = Model::build(&cfg, None, opts.seed)?;
        let (x, labels) = random_batch(opts.seed, 400, cfg.input_shape, 64, 3);
        let (mut smooth, mut good) = (0usize, 0usize);
        for block in 0..model.num_blocks() {
            let rep = taylor_residual_check(&model, &x, &labels, block, &TAYLOR_SCALES)?;
            let n = rep.kink_free();
            smooth += n;
            good += rep.fraction_at_least(TAYLOR_MIN_SLOPE).map_or(0, |f| (f * n as Real).round() as usize);
        }
        let bad = if smooth == 0 { 1.0 } else { 1.0 - good as Real / smooth as Real };
        let detail = format!("{good} of {smooth} kink-free samples with slope >= {TAYLOR_MIN_SLOPE}");
        checks.push(result("taylor_slope".into(), bad, 1.0 - TAYLOR_MIN_FRACTION, detail));
    }
    Ok(GradcheckReport {
        checks,
        wall_seconds: t0.elapsed().as_secs_f64() as Real,
    })
}
