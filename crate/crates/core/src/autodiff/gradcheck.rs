//! Central finite differences, used as the independent oracle for every
//! backward rule.

use rand::Rng as _;

use super::tape::{Conv2dAttrs, NormStats, OpAttrs, OpKind, Tape, Var};
use super::tensor::{relative_error, Tensor};
use crate::rng;
use crate::{Error, Real, Result};

/// `(f(x + eps·e_k) − f(x − eps·e_k)) / (2·eps)` for every component `k`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: Real) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Real>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.detach();
    let mut grad = vec![0.0; x.len()];
    for (k, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite-difference evaluation at component {k}"
            )));
        }
        *g = (up - down) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Outcome of checking one primitive against finite differences.
#[derive(Clone, Debug)]
pub struct PrimitiveCheck {
    pub kind: OpKind,
    pub seed: u64,
    /// Worst relative error over the op's differentiable inputs.
    pub max_rel_error: Real,
}

struct Case {
    inputs: Vec<Tensor>,
    attrs: OpAttrs,
}

fn random_tensor(r: &mut rng::Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

fn case_for(kind: OpKind, r: &mut rng::Rng) -> Case {
    let mut t = |s: &[usize]| random_tensor(r, s);
    match kind {
        OpKind::Add | OpKind::Mul => Case {
            inputs: vec![t(&[2, 3, 2]), t(&[2, 3, 2])],
            attrs: OpAttrs::None,
        },
        OpKind::Scale => Case {
            inputs: vec![t(&[4, 3])],
            attrs: OpAttrs::Scale(-1.7),
        },
        OpKind::Sum | OpKind::Relu | OpKind::Flatten => Case {
            inputs: vec![t(&[2, 3, 2, 2])],
            attrs: OpAttrs::None,
        },
        OpKind::MatMul => Case {
            inputs: vec![t(&[3, 4]), t(&[4, 2])],
            attrs: OpAttrs::None,
        },
        OpKind::Conv2d => Case {
            inputs: vec![t(&[2, 2, 5, 5]), t(&[3, 2, 3, 3]), t(&[3])],
            attrs: OpAttrs::Conv2d(Conv2dAttrs {
                stride: 2,
                padding: 1,
            }),
        },
        OpKind::BiasAdd => Case {
            inputs: vec![t(&[2, 3, 2, 2]), t(&[3])],
            attrs: OpAttrs::None,
        },
        OpKind::AvgPool2d => Case {
            inputs: vec![t(&[2, 2, 4, 4])],
            attrs: OpAttrs::Pool {
                kernel_h: 2,
                kernel_w: 2,
            },
        },
        OpKind::BatchNorm => Case {
            inputs: vec![t(&[4, 3, 2, 2]), t(&[3]), t(&[3])],
            attrs: OpAttrs::BatchNorm {
                eps: 1e-5,
                stats: NormStats::Batch,
            },
        },
        OpKind::SoftmaxCrossEntropy => {
            let labels = (0..5).map(|i| (i * 7 + 3) % 4).collect();
            Case {
                inputs: vec![t(&[5, 4])],
                attrs: OpAttrs::Labels(labels),
            }
        }
    }
}

/// Evaluates `sum(op(inputs) ⊙ weights)` on a fresh tape.
fn weighted_output(
    kind: OpKind,
    inputs: &[Tensor],
    attrs: &OpAttrs,
    weights: Option<&Tensor>,
    fault: Option<OpKind>,
) -> Result<(Tape, Vec<Var>, Var, Var)> {
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let vars = inputs
        .iter()
        .map(|x| tape.param(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let raw = tape.forward_op(kind, &vars, attrs)?;
    let out = match weights {
        Some(w) => {
            let w = tape.constant(w.clone())?;
            let p = tape.mul(raw, w)?;
            tape.sum(p)?
        }
        None => tape.sum(raw)?,
    };
    Ok((tape, vars, raw, out))
}

/// Compares backward against central differences (eps = 1e-5) for one primitive.
pub fn check_primitive(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<PrimitiveCheck> {
    let mut r = rng::stream(seed, &[rng::TAG_GRADCHECK, kind as u64]);
    let case = case_for(kind, &mut r);
    // Weighting the output keeps sum-invariant ops (softmax rows, BN) from
    // producing identically zero gradients.
    let weights = {
        let (tape, _, raw, _) = weighted_output(kind, &case.inputs, &case.attrs, None, None)?;
        let shape = tape.shape(raw).to_vec();
        Some(random_tensor(&mut r, &shape))
    };
    let (mut tape, vars, _, out) = weighted_output(kind, &case.inputs, &case.attrs, weights.as_ref(), fault)?;
    tape.backward_from(out)?;
    let mut worst: Real = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad_wrt(*v)?;
        let numeric = finite_diff_grad(
            |x| {
                let mut inputs = case.inputs.clone();
                inputs[i] = x.clone();
                let (tape, _, _, out) = weighted_output(kind, &inputs, &case.attrs, weights.as_ref(), None)?;
                Ok(tape.value(out).data()[0])
            },
            &case.inputs[i],
            1e-5,
        )?;
        worst = worst.max(relative_error(analytic.data(), numeric.data()));
    }
    Ok(PrimitiveCheck {
        kind,
        seed,
        max_rel_error: worst,
    })
}
