use serde::{Deserialize, Serialize};

use crate::autodiff::{l2, Tensor};
use crate::nn::{ForwardOptions, Mode, Model};
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormReport {
    /// ‖∂L/∂h‖ at the first block of the first stage over the same at the
    /// first block of the last stage (whole-batch norms).
    pub ratio: Real,
    /// Set when the denominator vanished and `ratio` is infinite.
    pub vanished: bool,
    pub first_grad_norm: Real,
    pub last_grad_norm: Real,
    /// Batch-mean per-sample ‖h‖ entering each block, then at the head input.
    pub activation_norms: Vec<Real>,
}

pub fn grad_norm_ratio(model: &Model, x: &Tensor, labels: &[usize], mode: Mode) -> Result<GradNormReport> {
    if model.stages().len() < 2 {
        return Err(Error::ProbeUndefined(format!(
            "gradient-norm ratio needs at least two stages, the model has {}",
            model.stages().len()
        )));
    }
    let opts = ForwardOptions {
        retain_h: true,
        ..Default::default()
    };
    let mut pass = model.forward(x, mode, &opts)?;
    let loss = pass.tape.softmax_cross_entropy(pass.logits, labels)?;
    pass.tape.backward(&loss)?;
    let first = pass.tape.grad_wrt(pass.h(0)?)?.norm();
    let last = pass.tape.grad_wrt(pass.h(model.last_stage_blocks().start)?)?.norm();
    let mean_norm = |t: &Tensor| (0..t.batch()).map(|i| l2(t.row(i))).sum::<Real>() / t.batch() as Real;
    let mut activation_norms = Vec::with_capacity(model.num_blocks() + 1);
    for i in 0..model.num_blocks() {
        activation_norms.push(mean_norm(pass.tape.value(pass.h(i)?)));
    }
    activation_norms.push(mean_norm(pass.tape.value(pass.head_input)));
    let vanished = last == 0.0;
    Ok(GradNormReport {
        ratio: if vanished { Real::INFINITY } else { first / last },
        vanished,
        first_grad_norm: first,
        last_grad_norm: last,
        activation_norms,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepCheck {
    /// Stem output after one SGD step on the stem weights and bias, minus before.
    pub delta_h: Tensor,
    /// −η(‖x‖² + 1)·∂L/∂h_o.
    pub predicted: Tensor,
    pub rel_error: Real,
}

/// Compares the change of the stem output under one plain SGD step on the stem
/// parameters with −η(‖x‖² + 1)·∂L/∂h_o. The identity holds when every output
/// unit sees the whole input, so the model input must be C×1×1 (the 3×3 stem
/// then reduces to a dense layer through its centre tap).
pub fn first_layer_gradient_step_check(
    model: &Model,
    x: &Tensor,
    label: usize,
    eta: Real,
    momentum: Real,
) -> Result<StepCheck> {
    if momentum != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "the step identity holds for plain SGD only (momentum {momentum})"
        )));
    }
    if x.shape().first() != Some(&1) {
        return Err(Error::InvalidArgument(format!(
            "the step identity is per-sample; got a batch of shape {:?}",
            x.shape()
        )));
    }
    let [_, h, w] = model.config().input_shape;
    if (h, w) != (1, 1) {
        return Err(Error::InvalidArgument(format!(
            "the stem is a shared-weight convolution over {h}x{w} positions; the identity needs a dense stem (1x1 input)"
        )));
    }
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("step size {eta} must be nonnegative")));
    }
    let opts = ForwardOptions {
        params_require_grad: true,
        retain_stem: true,
        ..Default::default()
    };
    let mut pass = model.forward(x, Mode::Eval, &opts)?;
    let loss = pass.tape.softmax_cross_entropy(pass.logits, &[label])?;
    pass.tape.backward(&loss)?;
    let stem_out = pass.stem_out.expect("forward from the input");
    let before = pass.tape.tensor(stem_out).detach();
    let g = pass.tape.grad_wrt(stem_out)?;
    let stem = model.stem();
    let gw = pass.tape.grad_wrt(pass.binder.var(stem.weight).expect("stem bound"))?;
    let gb = pass.tape.grad_wrt(pass.binder.var(stem.bias).expect("stem bound"))?;

    let mut stepped = model.clone();
    for (id, grad) in [(stem.weight, &gw), (stem.bias, &gb)] {
        for (p, d) in stepped.params_mut().value_mut(id).data_mut().iter_mut().zip(grad.data()) {
            *p -= eta * d;
        }
    }
    let after_pass = stepped.forward(x, Mode::Eval, &ForwardOptions::default())?;
    let after = after_pass.tape.value(after_pass.stem_out.expect("forward from the input"));

    let factor = eta * (x.data().iter().map(|v| v * v).sum::<Real>() + 1.0);
    let delta_h = Tensor::from_fn(before.shape().to_vec(), |i| after.data()[i] - before.data()[i]);
    let predicted = Tensor::from_fn(before.shape().to_vec(), |i| -factor * g.data()[i]);
    let diff: Vec<Real> = delta_h.data().iter().zip(predicted.data()).map(|(a, b)| a - b).collect();
    let denom = predicted.norm();
    let rel_error = if denom == 0.0 {
        if l2(&diff) == 0.0 { 0.0 } else { Real::INFINITY }
    } else {
        l2(&diff) / denom
    };
    Ok(StepCheck {
        delta_h,
        predicted,
        rel_error,
    })
}

pub const TAYLOR_SCALES: [Real; 4] = [1.0, 0.5, 0.25, 0.125];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorSample {
    /// `R(s)` for each scale, in the order given.
    pub residuals: Vec<Real>,
    /// Least-squares slope of log R against log s; `None` when some R is zero.
    pub slope: Option<Real>,
    /// The ReLU sign pattern differs between s = 0 and the largest s.
    pub kinked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub block: usize,
    pub scales: Vec<Real>,
    pub samples: Vec<TaylorSample>,
}

impl TaylorReport {
    /// Slopes of samples whose activation pattern is unchanged.
    pub fn smooth_slopes(&self) -> Vec<Real> {
        self.samples.iter().filter(|s| !s.kinked).filter_map(|s| s.slope).collect()
    }

    pub fn kink_free(&self) -> usize {
        self.samples.iter().filter(|s| !s.kinked).count()
    }

    /// Fraction of kink-free samples whose slope reaches `min_slope`.
    pub fn fraction_at_least(&self, min_slope: Real) -> Option<Real> {
        let n = self.kink_free();
        (n > 0).then(|| {
            self.samples
                .iter()
                .filter(|s| !s.kinked && s.slope.is_some_and(|v| v >= min_slope))
                .count() as Real
                / n as Real
        })
    }
}

/// `R(s) = |L(s) − L(0) − s·d|` for each scale, where `d` is the directional
/// derivative at 0.
pub fn taylor_residuals(l0: Real, directional: Real, values: &[(Real, Real)]) -> Vec<Real> {
    values.iter().map(|&(s, ls)| (ls - l0 - s * directional).abs()).collect()
}

/// Least-squares slope of log y against log x.
pub fn loglog_slope(x: &[Real], y: &[Real]) -> Option<Real> {
    if x.len() < 2 || y.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return None;
    }
    let lx: Vec<Real> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<Real> = y.iter().map(|v| v.ln()).collect();
    let n = x.len() as Real;
    let (mx, my) = (lx.iter().sum::<Real>() / n, ly.iter().sum::<Real>() / n);
    let sxy: Real = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: Real = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Expands the per-sample loss of the network downstream of block `block`
/// around the block input: with G the downstream map from the residual stream
/// after the block, compares G(h + s·F(h)) with G(h) + s·F(h)·∇G(h).
pub fn taylor_residual_check(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    block: usize,
    scales: &[Real],
) -> Result<TaylorReport> {
    model.locate(block)?;
    let base = model.forward(x, Mode::Eval, &ForwardOptions::default())?;
    let h = base.tape.tensor(base.h(block)?).detach();
    let f = base.tape.tensor(base.f(block)?).detach();
    let n = h.batch();
    let run = |s: Real, relus: bool| -> Result<(Vec<Real>, Option<Tensor>, Vec<Vec<bool>>)> {
        let z = Tensor::from_fn(h.shape().to_vec(), |i| h.data()[i] + s * f.data()[i]);
        let opts = ForwardOptions {
            inject_after: Some((block, z)),
            record_relus: relus,
            ..Default::default()
        };
        let mut pass = model.forward(x, Mode::Eval, &opts)?;
        let loss = pass.tape.softmax_cross_entropy(pass.logits, labels)?;
        if loss.per_sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("downstream loss at scale {s}")));
        }
        let pattern: Vec<Vec<bool>> = (0..n)
            .map(|i| {
                pass.relus
                    .iter()
                    .flat_map(|&r| pass.tape.value(r).row(i).iter().map(|&v| v > 0.0).collect::<Vec<_>>())
                    .collect()
            })
            .collect();
        let grad = if s == 0.0 {
            pass.tape.backward(&loss)?;
            Some(pass.tape.grad_wrt(pass.injected.expect("injected leaf"))?)
        } else {
            None
        };
        Ok((loss.per_sample, grad, pattern))
    };
    let (l0, grad, p0) = run(0.0, true)?;
    let grad = grad.expect("gradient at s = 0");
    let largest = scales.iter().cloned().fold(0.0, Real::max);
    let mut values = Vec::with_capacity(scales.len());
    let mut p_big = None;
    for &s in scales {
        let (ls, _, p) = run(s, s == largest)?;
        if s == largest {
            p_big = Some(p);
        }
        values.push(ls);
    }
    let p_big = p_big.unwrap_or_else(|| p0.clone());
    let samples = (0..n)
        .map(|i| {
            // The loss is a batch mean; per-sample gradients are N times its gradient.
            let d = n as Real * crate::autodiff::dot(grad.row(i), f.row(i));
            let pts: Vec<(Real, Real)> = scales.iter().zip(&values).map(|(&s, v)| (s, v[i])).collect();
            let residuals = taylor_residuals(l0[i], d, &pts);
            TaylorSample {
                slope: loglog_slope(scales, &residuals),
                residuals,
                kinked: p0[i] != p_big[i],
            }
        })
        .collect();
    Ok(TaylorReport {
        block,
        scales: scales.to_vec(),
        samples,
    })
}
