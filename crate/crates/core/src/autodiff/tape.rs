//! Recording tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough context to
//! apply its local gradient rule. Inputs are always recorded before the ops
//! that consume them, so the node order is already topological and backward is
//! a single reverse sweep.

use std::str::FromStr;

use super::kernels::{self, ConvGeometry};
use super::tensor::{NodeId, Tensor};
use crate::{Error, Real, Result};

/// Copyable handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(NodeId);

impl Var {
    pub fn id(self) -> NodeId {
        self.0
    }

    fn ix(self) -> usize {
        self.0 .0
    }
}

/// The primitive set understood by [`Tape::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Scale,
    Mul,
    Sum,
    MatMul,
    Conv2d,
    BiasAdd,
    Relu,
    AvgPool2d,
    BatchNorm,
    Flatten,
    SoftmaxCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Add,
        OpKind::Scale,
        OpKind::Mul,
        OpKind::Sum,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::BiasAdd,
        OpKind::Relu,
        OpKind::AvgPool2d,
        OpKind::BatchNorm,
        OpKind::Flatten,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::BiasAdd => "bias_add",
            OpKind::Relu => "relu",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Flatten => "flatten",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dAttrs {
    fn default() -> Self {
        Conv2dAttrs {
            stride: 1,
            padding: 0,
        }
    }
}

/// Which statistics a batch-norm node normalizes with.
#[derive(Clone, Debug, PartialEq)]
pub enum NormStats {
    /// Per-channel statistics of the current batch (biased variance).
    Batch,
    /// Fixed per-channel statistics, e.g. running averages.
    Fixed { mean: Vec<Real>, var: Vec<Real> },
}

/// Per-channel statistics measured on a batch during a [`NormStats::Batch`] op.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
    /// Number of values reduced per channel (N·H·W).
    pub count: usize,
}

/// Op-specific attributes for the dynamic [`Tape::forward_op`] entry point.
#[derive(Clone, Debug, PartialEq)]
pub enum OpAttrs {
    None,
    Scale(Real),
    Conv2d(Conv2dAttrs),
    Pool { kernel_h: usize, kernel_w: usize },
    BatchNorm { eps: Real, stats: NormStats },
    Labels(Vec<usize>),
}

/// Scalar loss on the tape plus the per-example values it averages.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub total: Var,
    pub per_sample: Vec<Real>,
    /// Softmax rows (N×K) when the loss came from a classifier.
    pub probabilities: Option<Tensor>,
}

impl LossValue {
    /// Wraps an arbitrary scalar node so it can be passed to [`Tape::backward`].
    pub fn from_scalar(tape: &Tape, total: Var) -> Result<LossValue> {
        let v = tape.value(total);
        if v.len() != 1 {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        Ok(LossValue {
            total,
            per_sample: vec![v.data()[0]],
            probabilities: None,
        })
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, Real),
    Mul(Var, Var),
    Sum(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BiasAdd(Var, Var),
    Relu(Var),
    AvgPool2d {
        x: Var,
        kh: usize,
        kw: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
        batch_stats: bool,
    },
    Flatten(Var),
    SoftmaxCe {
        logits: Var,
        probs: Vec<Real>,
        labels: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Mul(..) => OpKind::Mul,
            Op::Sum(..) => OpKind::Sum,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BiasAdd(..) => OpKind::BiasAdd,
            Op::Relu(..) => OpKind::Relu,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Flatten(..) => OpKind::Flatten,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain: bool,
}

/// Single-writer recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
    frozen: bool,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.frozen = false;
    }

    /// Test fixture: perturbs the backward rule of one op kind so that
    /// gradient checks can be shown to catch it.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.frozen {
            return Err(Error::TapeFrozen);
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
        });
        Ok(Var(id))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.ix()].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value.detach(), Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Marks a node so its gradient survives backward. Must happen before the
    /// node's consumers are recorded.
    pub fn retain(&mut self, v: Var) -> Result<()> {
        if self.frozen {
            return Err(Error::TapeFrozen);
        }
        let n = &mut self.nodes[v.ix()];
        n.retain = true;
        n.requires_grad = true;
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.ix()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.ix()].value.shape()
    }

    /// The value of `v` with its node id and, when available, its gradient.
    pub fn tensor(&self, v: Var) -> Tensor {
        let grad = self.grads.get(v.ix()).cloned().flatten();
        self.nodes[v.ix()].value.clone().attach(v.id(), grad)
    }

    /// ∂(loss)/∂v for a leaf with gradient enabled or a retained intermediate.
    pub fn grad_wrt(&self, v: Var) -> Result<Tensor> {
        let node = &self.nodes[v.ix()];
        if !self.frozen {
            return Err(Error::NoGradients);
        }
        match self.grads.get(v.ix()).and_then(|g| g.as_ref()) {
            Some(g) => Ok(Tensor::from_parts(node.value.shape().to_vec(), g.clone())),
            None => Err(Error::NotRetained(v.ix())),
        }
    }

    // ---------------------------------------------------------------------
    // ops
    // ---------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * s).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            0.0,
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, attrs: Conv2dAttrs) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("need NCHW input and OIHW kernel, got {sx:?} and {sw:?}"),
            ));
        }
        if sw[1] != sx[1] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} input channels, input has {}", sw[1], sx[1]),
            ));
        }
        if attrs.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if sx[2] + 2 * attrs.padding < sw[2] || sx[3] + 2 * attrs.padding < sw[3] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} larger than padded input {}x{}",
                    sw[2],
                    sw[3],
                    sx[2] + 2 * attrs.padding,
                    sx[3] + 2 * attrs.padding
                ),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), sw[0]),
                ));
            }
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride: attrs.stride,
            padding: attrs.padding,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let shape = vec![sx[0], sw[0], geom.out_height(), geom.out_width()];
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Adds a per-channel bias along axis 1.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(b) != [sx[1]] {
            return Err(Error::shape(
                "bias_add",
                format!("bias {:?} does not match input {sx:?}", self.shape(b)),
            ));
        }
        let inner: usize = sx[2..].iter().product();
        let c = sx[1];
        let bv = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[(i / inner) % c])
            .collect();
        let rg = self.rg(&[x, b]);
        self.push(Tensor::from_parts(sx, data), Op::BiasAdd(x, b), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect(),
        );
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Non-overlapping average pooling (stride equals kernel).
    pub fn avg_pool2d(&mut self, x: Var, kernel_h: usize, kernel_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kernel_h == 0 || kernel_w == 0 || s[2] % kernel_h != 0 || s[3] % kernel_w != 0
        {
            return Err(Error::shape(
                "avg_pool2d",
                format!("kernel {kernel_h}x{kernel_w} does not tile input {s:?}"),
            ));
        }
        let out = kernels::avg_pool_forward(
            self.value(x).data(),
            s[0] * s[1],
            s[2],
            s[3],
            kernel_h,
            kernel_w,
        );
        let shape = vec![s[0], s[1], s[2] / kernel_h, s[3] / kernel_w];
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::AvgPool2d {
                x,
                kh: kernel_h,
                kw: kernel_w,
            },
            rg,
        )
    }

    /// Per-channel normalization over every axis except 1, followed by the
    /// affine map `gamma * x̂ + beta`. Returns the batch statistics when
    /// normalizing with [`NormStats::Batch`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: Real,
        stats: NormStats,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("batchnorm", format!("input {s:?} has no channel axis")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "gamma {:?} / beta {:?} do not match {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let n = s[0];
        let count = n * inner;
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in 0..n {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let off = (i * c + ch) * inner;
                        *m += xv[off..off + inner].iter().sum::<Real>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as Real);
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * inner;
                        var[ch] += xv[off..off + inner]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<Real>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as Real);
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batchnorm",
                        format!("running statistics have {} channels, input {c}", mean.len()),
                    ));
                }
                (mean, var, false)
            }
        };
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = (i / inner) % c;
            *xh = (xv[i] - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + b[ch];
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::from_parts(s, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )?;
        Ok((v, batch_stats.then_some(BatchStats { mean, var, count })))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.shape()[0];
        let out = Tensor::from_parts(vec![n, v.len() / n], v.data().to_vec());
        let rg = self.rg(&[x]);
        self.push(out, Op::Flatten(x), rg)
    }

    /// Mean softmax cross-entropy of `logits` (N×K) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<LossValue> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut per_sample = Vec::with_capacity(n);
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let z: Real = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            let y = labels[i];
            // When the label holds the largest logit, ln(1 + Σ_{j≠y} e^{z_j - z_y})
            // keeps full relative precision for confident predictions.
            let loss = if row[y] == max {
                let rest: Real = (0..k).filter(|&j| j != y).map(|j| (row[j] - row[y]).exp()).sum();
                rest.ln_1p()
            } else {
                lse - row[y]
            };
            per_sample.push(loss);
        }
        let total = per_sample.iter().sum::<Real>() / n as Real;
        let rg = self.rg(&[logits]);
        let probabilities = Tensor::from_parts(vec![n, k], probs.clone());
        let v = self.push(
            Tensor::scalar(total),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        )?;
        Ok(LossValue {
            total: v,
            per_sample,
            probabilities: Some(probabilities),
        })
    }

    /// Dynamic dispatch over the primitive set.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape(
                    "forward_op",
                    format!("{kind} takes {n} inputs, got {}", inputs.len()),
                ))
            }
        };
        let bad_attrs = || Error::InvalidArgument(format!("attributes {attrs:?} do not fit {kind}"));
        match kind {
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Scale => {
                arity(1)?;
                let OpAttrs::Scale(s) = attrs else { return Err(bad_attrs()) };
                self.scale(inputs[0], *s)
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Conv2d => {
                let a = match attrs {
                    OpAttrs::Conv2d(a) => *a,
                    OpAttrs::None => Conv2dAttrs::default(),
                    _ => return Err(bad_attrs()),
                };
                match inputs {
                    [x, w] => self.conv2d(*x, *w, None, a),
                    [x, w, b] => self.conv2d(*x, *w, Some(*b), a),
                    _ => Err(Error::shape(
                        "forward_op",
                        format!("conv2d takes 2 or 3 inputs, got {}", inputs.len()),
                    )),
                }
            }
            OpKind::BiasAdd => {
                arity(2)?;
                self.bias_add(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            OpKind::AvgPool2d => {
                arity(1)?;
                let OpAttrs::Pool { kernel_h, kernel_w } = attrs else { return Err(bad_attrs()) };
                self.avg_pool2d(inputs[0], *kernel_h, *kernel_w)
            }
            OpKind::BatchNorm => {
                arity(3)?;
                let OpAttrs::BatchNorm { eps, stats } = attrs else { return Err(bad_attrs()) };
                Ok(self.batch_norm(inputs[0], inputs[1], inputs[2], *eps, stats.clone())?.0)
            }
            OpKind::Flatten => {
                arity(1)?;
                self.flatten(inputs[0])
            }
            OpKind::SoftmaxCrossEntropy => {
                arity(1)?;
                let OpAttrs::Labels(labels) = attrs else { return Err(bad_attrs()) };
                Ok(self.softmax_cross_entropy(inputs[0], labels)?.total)
            }
        }
    }

    // ---------------------------------------------------------------------
    // backward
    // ---------------------------------------------------------------------

    pub fn backward(&mut self, loss: &LossValue) -> Result<()> {
        self.backward_from(loss.total)
    }

    /// Reverse sweep from a scalar node. Freezes the tape; a second call
    /// without [`reset`](Self::reset) is rejected.
    pub fn backward_from(&mut self, out: Var) -> Result<()> {
        if self.frozen {
            return Err(Error::TapeFrozen);
        }
        let shape = self.shape(out);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let n = self.nodes.len();
        let mut work: Vec<Option<Vec<Real>>> = (0..n).map(|_| None).collect();
        let mut kept: Vec<Option<Vec<Real>>> = (0..n).map(|_| None).collect();
        work[out.ix()] = Some(vec![1.0]);
        for i in (0..=out.ix()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                work[i] = None;
                continue;
            }
            let Some(g) = work[i].take() else { continue };
            self.propagate(i, &g, &mut work);
            if node.retain || matches!(node.op, Op::Leaf) {
                kept[i] = Some(g);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && kept[i].is_none() && (node.retain || matches!(node.op, Op::Leaf))
            {
                kept[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = kept;
        self.frozen = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[Real], work: &mut [Option<Vec<Real>>]) {
        let node = &self.nodes[i];
        let faulty = node.op.kind().is_some() && node.op.kind() == self.fault;
        let mut send = |v: Var, contrib: Vec<Real>| {
            if !self.nodes[v.ix()].requires_grad {
                return;
            }
            let contrib = if faulty {
                contrib.into_iter().map(|c| c * 1.05).collect()
            } else {
                contrib
            };
            match &mut work[v.ix()] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.ix()].value.data();
        let needs = |v: Var| self.nodes[v.ix()].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::Mul(a, b) => {
                if needs(*a) {
                    send(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if needs(*b) {
                    send(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.nodes[a.ix()].value.len()]),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.ix()].value.shape(), self.nodes[b.ix()].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    // dA (M×K) = dC (M×N) · Bᵀ
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, 1.0, g, n as isize, 1, val(*b), 1, n as isize, 0.0, &mut da, k as isize, 1);
                    send(*a, da);
                }
                if needs(*b) {
                    // dB (K×N) = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, 1.0, val(*a), 1, k as isize, g, n as isize, 1, 0.0, &mut db, n as isize, 1);
                    send(*b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut gx = needs(*x).then(|| vec![0.0; val(*x).len()]);
                let mut gw = needs(*w).then(|| vec![0.0; val(*w).len()]);
                let mut gb = b.filter(|b| needs(*b)).map(|b| vec![0.0; val(b).len()]);
                kernels::conv2d_backward(
                    geom,
                    val(*x),
                    val(*w),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                if let Some(gw) = gw {
                    send(*w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    send(*b, gb);
                }
            }
            Op::BiasAdd(x, b) => {
                let s = self.nodes[x.ix()].value.shape();
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                if needs(*b) {
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        gb[(i / inner) % c] += v;
                    }
                    send(*b, gb);
                }
                send(*x, g.to_vec());
            }
            Op::Relu(x) => send(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect(),
            ),
            Op::AvgPool2d { x, kh, kw } => {
                let s = self.nodes[x.ix()].value.shape();
                let mut gx = vec![0.0; val(*x).len()];
                kernels::avg_pool_backward(g, &mut gx, s[0] * s[1], s[2], s[3], *kh, *kw);
                send(*x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.nodes[x.ix()].value.shape();
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let count = (s[0] * inner) as Real;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = (i / inner) % c;
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * xh;
                }
                if needs(*x) {
                    let gam = val(*gamma);
                    let gx = g
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (gv, xh))| {
                            let ch = (i / inner) % c;
                            let k = gam[ch] * inv_std[ch];
                            if *batch_stats {
                                k * (gv - sum_g[ch] / count - xh * sum_gx[ch] / count)
                            } else {
                                k * gv
                            }
                        })
                        .collect();
                    send(*x, gx);
                }
                send(*gamma, sum_gx);
                send(*beta, sum_g);
            }
            Op::Flatten(x) => send(*x, g.to_vec()),
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as Real;
                let mut gl: Vec<Real> = probs.iter().map(|p| p * scale).collect();
                // p_y - 1 = -Σ_{j≠y} p_j, summed directly to avoid cancellation.
                for (i, &y) in labels.iter().enumerate() {
                    let row = &probs[i * k..(i + 1) * k];
                    let rest: Real = (0..k).filter(|&j| j != y).map(|j| row[j]).sum();
                    gl[i * k + y] = -rest * scale;
                }
                send(*logits, gl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 })).unwrap();
        let a_t = Tensor::from_fn([3, 3], |i| i as Real * 0.7 - 2.0);
        let a = tape.constant(a_t.clone()).unwrap();
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).data(), a_t.data());
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = LossValue::from_scalar(&tape, s).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_wrt(x).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(tape.tensor(x).grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let c = tape.constant(Tensor::scalar(4.0)).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward_from(s).unwrap();
        assert_eq!(tape.grad_wrt(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[1.0])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward_from(s).unwrap();
        assert!(matches!(tape.backward_from(s), Err(Error::TapeFrozen)));
        tape.reset();
        assert!(tape.is_empty() && !tape.is_frozen());
    }

    #[test]
    fn retained_intermediate_gradients() {
        let mut tape = Tape::new();
        let h = tape.constant(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0])).unwrap();
        tape.retain(h).unwrap();
        let s = tape.sum(h).unwrap();
        tape.backward_from(s).unwrap();
        assert_eq!(tape.grad_wrt(h).unwrap().data(), &[1.0; 4]);

        // 0.5·‖h‖² → h
        let mut tape = Tape::new();
        let hv = t(&[3], &[0.3, -1.0, 2.0]);
        let h = tape.constant(hv.clone()).unwrap();
        tape.retain(h).unwrap();
        let sq = tape.mul(h, h).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        tape.backward_from(half).unwrap();
        assert_eq!(tape.grad_wrt(h).unwrap().data(), hv.data());
    }

    #[test]
    fn unmarked_activation_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward_from(s).unwrap();
        assert!(matches!(tape.grad_wrt(y), Err(Error::NotRetained(_))));
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros([2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4])).unwrap();
        let w = tape.constant(Tensor::zeros([1, 3, 3, 3])).unwrap();
        let err = tape.conv2d(x, w, None, Conv2dAttrs::default()).unwrap_err().to_string();
        assert!(err.contains("3 input channels"), "{err}");
    }

    #[test]
    fn unknown_op_kind() {
        assert!(matches!("softmax".parse::<OpKind>(), Err(Error::UnknownOp(_))));
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
    }

    #[test]
    fn batch_stats_match_direct_computation() {
        let mut tape = Tape::new();
        let x = Tensor::from_fn([3, 2, 2, 2], |i| ((i * 37) % 11) as Real * 0.3 - 1.0);
        let xv = tape.constant(x.clone()).unwrap();
        let g = tape.constant(Tensor::full([2], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros([2])).unwrap();
        let (_, stats) = tape.batch_norm(xv, g, b, 1e-5, NormStats::Batch).unwrap();
        let stats = stats.unwrap();
        for ch in 0..2 {
            let vals: Vec<Real> = (0..3)
                .flat_map(|n| x.data()[(n * 2 + ch) * 4..(n * 2 + ch) * 4 + 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<Real>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<Real>() / 12.0;
            assert!((stats.mean[ch] - mean).abs() < 1e-14);
            assert!((stats.var[ch] - var).abs() < 1e-14);
        }
        assert_eq!(stats.count, 12);
    }
}
