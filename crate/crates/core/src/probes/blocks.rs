use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, l2, Tape, Tensor};
use crate::data::{batch_indices, Dataset};
use crate::nn::{ForwardOptions, Mode, Model};
use crate::train::{evaluate_with, Evaluation};
use crate::{Error, Real, Result};

/// Batch mean of a per-sample quantity with the number of samples left out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub mean: Real,
    pub used: usize,
    pub excluded: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Accumulator {
    sum: Real,
    used: usize,
    excluded: usize,
}

impl Accumulator {
    pub(crate) fn push(&mut self, v: Option<Real>) {
        match v {
            Some(v) => {
                self.sum += v;
                self.used += 1;
            }
            None => self.excluded += 1,
        }
    }

    pub(crate) fn merge(&mut self, o: Accumulator) {
        self.sum += o.sum;
        self.used += o.used;
        self.excluded += o.excluded;
    }

    pub(crate) fn finish(self, what: &str) -> Result<Measured> {
        if self.used == 0 {
            return Err(Error::ProbeUndefined(format!(
                "{what}: all {} samples excluded for zero norm",
                self.excluded
            )));
        }
        Ok(Measured {
            mean: self.sum / self.used as Real,
            used: self.used,
            excluded: self.excluded,
        })
    }
}

/// Cosine of `a` and `b`, clamped to [-1, 1]; `None` if either norm is zero.
pub fn cosine(a: &[Real], b: &[Real]) -> Option<Real> {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 || !(na * nb).is_finite() {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn ratio(f: &[Real], h: &[Real]) -> Option<Real> {
    let nh = l2(h);
    (nh > 0.0).then(|| l2(f) / nh)
}

/// Per-sample cosine between rows of `f` and rows of `g`, batch-averaged.
pub fn cosine_rows(f: &Tensor, g: &Tensor) -> Result<Measured> {
    rows(f, g, cosine).finish("cosine loss")
}

/// Per-sample ‖f‖/‖h‖ over rows, batch-averaged.
pub fn l2_ratio_rows(f: &Tensor, h: &Tensor) -> Result<Measured> {
    rows(f, h, ratio).finish("l2 ratio")
}

fn rows(a: &Tensor, b: &Tensor, m: impl Fn(&[Real], &[Real]) -> Option<Real>) -> Accumulator {
    let mut acc = Accumulator::default();
    for i in 0..a.batch() {
        acc.push(m(a.row(i), b.row(i)));
    }
    acc
}

/// Block inputs, outputs and loss gradients at the inputs from one eval pass.
pub struct BlockVectors {
    pub h: Vec<Tensor>,
    pub f: Vec<Tensor>,
    /// ∂(mean loss)/∂h[i], holding parameters fixed.
    pub grad: Vec<Tensor>,
}

pub fn block_vectors(model: &Model, x: &Tensor, labels: &[usize]) -> Result<BlockVectors> {
    let opts = ForwardOptions {
        retain_h: true,
        ..Default::default()
    };
    let mut pass = model.forward(x, Mode::Eval, &opts)?;
    let loss = pass.tape.softmax_cross_entropy(pass.logits, labels)?;
    pass.tape.backward(&loss)?;
    let n = model.num_blocks();
    let mut out = BlockVectors {
        h: Vec::with_capacity(n),
        f: Vec::with_capacity(n),
        grad: Vec::with_capacity(n),
    };
    for i in 0..n {
        let h = pass.h(i)?;
        out.h.push(pass.tape.tensor(h).detach());
        out.f.push(pass.tape.tensor(pass.f(i)?).detach());
        out.grad.push(pass.tape.grad_wrt(h)?);
    }
    Ok(out)
}

fn check_block(model: &Model, block: usize) -> Result<()> {
    model.locate(block).map(|_| ())
}

/// Mean over the batch of cos(F_i(h_i), ∂L/∂h_i).
pub fn cosine_loss_probe(model: &Model, x: &Tensor, labels: &[usize], block: usize) -> Result<Measured> {
    check_block(model, block)?;
    let v = block_vectors(model, x, labels)?;
    cosine_rows(&v.f[block], &v.grad[block])
}

/// Mean over the batch of ‖F_i(h_i)‖/‖h_i‖.
pub fn l2_ratio_probe(model: &Model, x: &Tensor, block: usize) -> Result<Measured> {
    check_block(model, block)?;
    let pass = model.forward(x, Mode::Eval, &ForwardOptions::default())?;
    l2_ratio_rows(&pass.tape.tensor(pass.f(block)?), &pass.tape.tensor(pass.h(block)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockProbe {
    pub block: usize,
    pub stage: usize,
    pub cosine_loss: Measured,
    pub l2_ratio: Measured,
}

/// Cosine loss and ℓ² ratio for every block over a whole dataset.
pub fn block_probes(model: &Model, data: &Dataset, batch_size: usize) -> Result<Vec<BlockProbe>> {
    let n = model.num_blocks();
    let mut cos = vec![Accumulator::default(); n];
    let mut rat = vec![Accumulator::default(); n];
    for idx in batch_indices(data.len(), batch_size, None) {
        let (x, labels) = data.gather(&idx);
        let v = block_vectors(model, &x, &labels)?;
        for i in 0..n {
            cos[i].merge(rows(&v.f[i], &v.grad[i], cosine));
            rat[i].merge(rows(&v.f[i], &v.h[i], ratio));
        }
    }
    (0..n)
        .map(|i| {
            Ok(BlockProbe {
                block: i,
                stage: model.locate(i)?.0,
                cosine_loss: cos[i].finish(&format!("cosine loss at block {i}"))?,
                l2_ratio: rat[i].finish(&format!("l2 ratio at block {i}"))?,
            })
        })
        .collect()
}

/// Accuracy with block `block` replaced by the identity.
pub fn drop_block_eval(model: &Model, block: usize, data: &Dataset, batch_size: usize) -> Result<Real> {
    check_block(model, block)?;
    let opts = ForwardOptions {
        skip_block: Some(block),
        ..Default::default()
    };
    Ok(evaluate_with(model, data, batch_size, &opts)?.accuracy)
}

/// Accuracy after dropping each block in turn.
pub fn drop_scan(model: &Model, data: &Dataset, batch_size: usize) -> Result<Vec<Real>> {
    (0..model.num_blocks()).map(|b| drop_block_eval(model, b, data, batch_size)).collect()
}

fn softmax_eval(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Vec<Real>)> {
    let mut tape = Tape::new();
    let v = tape.constant(logits.detach())?;
    let loss = tape.softmax_cross_entropy(v, labels)?;
    Ok((loss.probabilities.expect("classifier loss"), loss.per_sample))
}

/// The final classifier applied after each block in `blocks` (all in the last
/// stage); one evaluation per block, in order.
pub fn intermediate_eval(model: &Model, data: &Dataset, blocks: Range<usize>, batch_size: usize) -> Result<Vec<Evaluation>> {
    let last = model.last_stage_blocks();
    if blocks.start < last.start || blocks.end > last.end {
        return Err(Error::shape(
            "intermediate_accuracy",
            format!(
                "blocks {blocks:?} reach outside the final stage {last:?}; the classifier input shape would not match"
            ),
        ));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let k = model.config().num_classes;
    let m = blocks.len();
    let mut probs = vec![Vec::with_capacity(data.len() * k); m];
    let mut losses = vec![Vec::with_capacity(data.len()); m];
    let mut correct = vec![0usize; m];
    for idx in batch_indices(data.len(), batch_size, None) {
        let (x, labels) = data.gather(&idx);
        let pass = model.forward(&x, Mode::Eval, &ForwardOptions::default())?;
        for (j, b) in blocks.clone().enumerate() {
            let h = pass.tape.value(pass.h(b)?);
            let f = pass.tape.value(pass.f(b)?);
            let next = Tensor::from_fn(h.shape().to_vec(), |i| h.data()[i] + f.data()[i]);
            let logits = model.head_logits(&next, Mode::Eval)?;
            let (p, l) = softmax_eval(&logits, &labels)?;
            correct[j] += (0..labels.len()).filter(|&i| argmax(p.row(i)) == labels[i]).count();
            probs[j].extend_from_slice(p.data());
            losses[j].extend(l);
        }
    }
    let n = data.len() as Real;
    probs
        .into_iter()
        .zip(losses)
        .zip(correct)
        .map(|((p, l), c)| {
            Ok(Evaluation {
                loss: l.iter().sum::<Real>() / n,
                accuracy: c as Real / n,
                probs: Tensor::new([data.len(), k], p)?,
                per_sample_loss: l,
            })
        })
        .collect()
}

/// Accuracy of the final classifier applied to the representation after `block`.
pub fn intermediate_accuracy(model: &Model, block: usize, data: &Dataset, batch_size: usize) -> Result<Real> {
    check_block(model, block)?;
    Ok(intermediate_eval(model, data, block..block + 1, batch_size)?[0].accuracy)
}

pub(crate) fn argmax(row: &[Real]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, Real::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
        .0
}

/// Signed gap between the true-class probability and its strongest competitor.
pub fn margin(row: &[Real], y: usize) -> Real {
    let rival = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &p)| p)
        .fold(Real::NEG_INFINITY, Real::max);
    row[y] - rival
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Borderline,
    Correct,
    All,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Borderline, Group::Correct, Group::All];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Borderline => "borderline",
            Group::Correct => "correct",
            Group::All => "all",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Groups {
    pub tau: Real,
    pub borderline: Vec<usize>,
    pub correct: Vec<usize>,
    pub all: Vec<usize>,
}

impl Groups {
    pub fn get(&self, g: Group) -> &[usize] {
        match g {
            Group::Borderline => &self.borderline,
            Group::Correct => &self.correct,
            Group::All => &self.all,
        }
    }
}

/// Partitions examples by their signed margin `m`: borderline iff
/// `|m| < 2·tau`, correct iff `m > 0`.
pub fn borderline_groups(probs: &Tensor, labels: &[usize], tau: Real) -> Result<Groups> {
    if !(tau > 0.0 && tau <= 0.5) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside (0, 0.5]")));
    }
    if probs.batch() != labels.len() {
        return Err(Error::shape(
            "borderline_split",
            format!("{} probability rows for {} labels", probs.batch(), labels.len()),
        ));
    }
    let mut g = Groups {
        tau,
        all: (0..labels.len()).collect(),
        ..Default::default()
    };
    for (i, &y) in labels.iter().enumerate() {
        let m = margin(probs.row(i), y);
        if m.abs() < 2.0 * tau {
            g.borderline.push(i);
        }
        if m > 0.0 {
            g.correct.push(i);
        }
    }
    Ok(g)
}

pub fn borderline_split(model: &Model, data: &Dataset, tau: Real, batch_size: usize) -> Result<Groups> {
    let ev = evaluate_with(model, data, batch_size, &ForwardOptions::default())?;
    borderline_groups(&ev.probs, &data.labels, tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetric {
    pub loss: Real,
    pub accuracy: Real,
    pub entropy: Real,
}

/// Shannon entropy in nats, with 0·ln 0 = 0.
pub fn entropy(row: &[Real]) -> Real {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<Real>()
}

/// Loss, accuracy and mean entropy over `idx`; `None` for an empty group.
pub fn group_metric(ev: &Evaluation, labels: &[usize], idx: &[usize]) -> Option<GroupMetric> {
    if idx.is_empty() {
        return None;
    }
    let n = idx.len() as Real;
    Some(GroupMetric {
        loss: idx.iter().map(|&i| ev.per_sample_loss[i]).sum::<Real>() / n,
        accuracy: idx.iter().filter(|&&i| argmax(ev.probs.row(i)) == labels[i]).count() as Real / n,
        entropy: idx.iter().map(|&i| entropy(ev.probs.row(i))).sum::<Real>() / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGroupMetrics {
    pub block: usize,
    pub borderline: Option<GroupMetric>,
    pub correct: Option<GroupMetric>,
    pub all: Option<GroupMetric>,
}

impl BlockGroupMetrics {
    pub fn get(&self, g: Group) -> Option<GroupMetric> {
        match g {
            Group::Borderline => self.borderline,
            Group::Correct => self.correct,
            Group::All => self.all,
        }
    }
}

pub fn group_metrics_from(block: usize, ev: &Evaluation, labels: &[usize], groups: &Groups) -> BlockGroupMetrics {
    BlockGroupMetrics {
        block,
        borderline: group_metric(ev, labels, &groups.borderline),
        correct: group_metric(ev, labels, &groups.correct),
        all: group_metric(ev, labels, &groups.all),
    }
}

/// Per-group metrics of the final classifier after each block in `blocks`.
pub fn group_metrics(
    model: &Model,
    data: &Dataset,
    groups: &Groups,
    blocks: Range<usize>,
    batch_size: usize,
) -> Result<Vec<BlockGroupMetrics>> {
    let evs = intermediate_eval(model, data, blocks.clone(), batch_size)?;
    Ok(blocks
        .zip(&evs)
        .map(|(b, ev)| group_metrics_from(b, ev, &data.labels, groups))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BorderlineReport {
    pub groups: Groups,
    pub per_block: Vec<BlockGroupMetrics>,
}

/// Groups at the final output plus their metrics across `blocks`.
pub fn borderline_report(
    model: &Model,
    data: &Dataset,
    tau: Real,
    blocks: Range<usize>,
    batch_size: usize,
) -> Result<BorderlineReport> {
    let groups = borderline_split(model, data, tau, batch_size)?;
    let per_block = group_metrics(model, data, &groups, blocks, batch_size)?;
    Ok(BorderlineReport { groups, per_block })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anti_parallel_and_orthogonal() {
        let g = Tensor::new([2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.1, -1.0]).unwrap();
        let f = Tensor::from_fn([2, 3], |i| -g.data()[i]);
        assert!((cosine_rows(&f, &g).unwrap().mean + 1.0).abs() < 1e-10);
        let mut o = vec![0.3, 0.7, -0.2, 1.0, 1.0, 1.0];
        for r in 0..2 {
            let (gr, orow) = (&g.data()[r * 3..r * 3 + 3], &mut o[r * 3..r * 3 + 3]);
            let c = dot(orow, gr) / dot(gr, gr);
            orow.iter_mut().zip(gr).for_each(|(a, b)| *a -= c * b);
        }
        let o = Tensor::new([2, 3], o).unwrap();
        assert!(cosine_rows(&o, &g).unwrap().mean.abs() < 1e-10);
    }

    #[test]
    fn zero_rows_are_excluded_and_counted() {
        let f = Tensor::new([2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let g = Tensor::new([2, 2], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let m = cosine_rows(&f, &g).unwrap();
        assert_eq!((m.used, m.excluded, m.mean), (1, 1, 1.0));
        let z = Tensor::zeros([2, 2]);
        assert!(matches!(cosine_rows(&z, &g), Err(Error::ProbeUndefined(_))));
        assert_eq!(l2_ratio_rows(&z, &g).unwrap().mean, 0.0);
        assert_eq!(l2_ratio_rows(&g, &g).unwrap().mean, 1.0);
    }

    #[test]
    fn borderline_rule() {
        let p = Tensor::new([3, 3], vec![0.95, 0.01, 0.04, 0.51, 0.49, 0.0, 0.3, 0.6, 0.1]).unwrap();
        let g = borderline_groups(&p, &[0, 0, 0], 0.1).unwrap();
        assert_eq!(g.borderline, vec![1]);
        assert_eq!(g.correct, vec![0, 1]);
        assert_eq!(g.all, vec![0, 1, 2]);
        assert!(borderline_groups(&p, &[0, 0, 0], 0.0).is_err());
    }

    #[test]
    fn entropy_extremes() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        let k = 7;
        let u = vec![1.0 / k as Real; k];
        assert!((entropy(&u) - (k as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_group_is_absent() {
        let ev = Evaluation {
            loss: 0.0,
            accuracy: 1.0,
            probs: Tensor::new([1, 2], vec![1.0, 0.0]).unwrap(),
            per_sample_loss: vec![0.0],
        };
        assert!(group_metric(&ev, &[0], &[]).is_none());
        assert_eq!(group_metric(&ev, &[0], &[0]).unwrap().accuracy, 1.0);
    }
}
