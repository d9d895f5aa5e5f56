//! SGD with classical momentum, stepwise learning-rate schedules and
//! flip/translate augmentation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{batch_indices, Dataset};
use crate::nn::{ForwardOptions, Mode, Model, ParamId, ParamStore};
use crate::rng::{stream, TAG_AUGMENT};
use crate::{Error, Real, Result};

/// Learning rate in effect while `epoch < until_epoch`; `None` means forever.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    #[serde(default)]
    pub until_epoch: Option<usize>,
    pub lr: Real,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    pub flip: bool,
    /// Maximum shift in pixels; vacated pixels are zero.
    pub translate_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: Real,
    pub lr_schedule: Vec<LrStep>,
    #[serde(default)]
    pub augment: Augment,
    pub seed: u64,
}

fn default_momentum() -> Real {
    0.9
}

/// The schedule used for the single-representation and pooling families,
/// with epochs divided by `compress` (1 reproduces it unchanged).
pub fn stepwise_schedule(compress: usize) -> Vec<LrStep> {
    let c = compress.max(1);
    vec![
        LrStep { until_epoch: Some(40 / c), lr: 0.1 },
        LrStep { until_epoch: Some(60 / c), lr: 0.02 },
        LrStep { until_epoch: Some(80 / c), lr: 0.004 },
        LrStep { until_epoch: None, lr: 0.0008 },
    ]
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_schedule.is_empty() {
            return Err(Error::Config("batch_size and lr_schedule must be nonempty".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        let mut prev: Option<usize> = None;
        for (i, s) in self.lr_schedule.iter().enumerate() {
            if !(s.lr.is_finite() && s.lr > 0.0) {
                return Err(Error::Config(format!("schedule entry {i}: lr {} must be positive", s.lr)));
            }
            match s.until_epoch {
                None if i + 1 != self.lr_schedule.len() => {
                    return Err(Error::Config(format!("schedule entry {i} is unbounded but not last")));
                }
                Some(u) if prev.is_some_and(|p| u <= p) => {
                    return Err(Error::Config(format!("schedule epochs must increase strictly (entry {i}: {u})")));
                }
                _ => prev = s.until_epoch,
            }
        }
        Ok(())
    }

    /// Learning rate for `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> Real {
        lr_at(&self.lr_schedule, epoch)
    }

    /// Base learning rate.
    pub fn eta(&self) -> Real {
        self.lr_schedule[0].lr
    }
}

/// First entry whose bound exceeds `epoch`; past every bound, the last entry.
pub fn lr_at(schedule: &[LrStep], epoch: usize) -> Real {
    schedule
        .iter()
        .find(|s| s.until_epoch.is_none_or(|u| epoch < u))
        .or(schedule.last())
        .map_or(0.0, |s| s.lr)
}

/// Velocity buffers indexed by parameter id; empty for non-trainable entries.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<Real>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        OptimizerState {
            velocity: store
                .iter()
                .map(|(_, p)| if p.kind.trainable() { vec![0.0; p.value.len()] } else { Vec::new() })
                .collect(),
        }
    }
}

/// `v ← momentum·v + g; p ← p − lr·v`. Nothing is modified when any gradient
/// is non-finite.
pub fn sgd_momentum_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut OptimizerState,
    lr: Real,
    momentum: Real,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    for (id, g) in grads {
        let p = store.get(*id);
        if g.shape() != p.value.shape() || state.velocity[id.0].len() != g.len() {
            return Err(Error::shape(
                "sgd",
                format!("gradient {:?} for {} {:?}", g.shape(), p.name, p.value.shape()),
            ));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    for (id, g) in grads {
        let v = &mut state.velocity[id.0];
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = momentum * *vi + gi;
        }
        for (pi, vi) in store.value_mut(*id).data_mut().iter_mut().zip(v.iter()) {
            *pi -= lr * vi;
        }
    }
    Ok(())
}

/// Flips and shifts one C×H×W example in place, drawing from the stream for
/// `(seed, epoch, sample)` so results do not depend on batch composition.
pub fn augment_example(img: &mut [Real], shape: [usize; 3], aug: &Augment, seed: u64, epoch: usize, sample: usize) {
    if !aug.flip && aug.translate_pixels == 0 {
        return;
    }
    let mut rng = stream(seed, &[TAG_AUGMENT, epoch as u64, sample as u64]);
    let flip = aug.flip && rng.random_bool(0.5);
    let t = aug.translate_pixels as i64;
    let (dy, dx) = if t > 0 { (rng.random_range(-t..=t), rng.random_range(-t..=t)) } else { (0, 0) };
    let [c, h, w] = shape;
    let src = img.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = y as i64 + dy;
                let sx0 = x as i64 + dx;
                let v = if sy < 0 || sy >= h as i64 || sx0 < 0 || sx0 >= w as i64 {
                    0.0
                } else {
                    let sx = if flip { w - 1 - sx0 as usize } else { sx0 as usize };
                    src[(ch * h + sy as usize) * w + sx]
                };
                img[(ch * h + y) * w + x] = v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: Real,
    pub train_loss: Real,
    pub train_acc: Real,
}

fn argmax(row: &[Real]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, Real::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
        .0
}

/// Runs one shuffled pass over `data`, updating parameters and running statistics.
pub fn train_epoch(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    epoch: usize,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if data.image_shape() != model.config().input_shape {
        return Err(Error::shape(
            "train_epoch",
            format!("examples {:?} for a model expecting {:?}", data.image_shape(), model.config().input_shape),
        ));
    }
    let lr = cfg.lr_at(epoch);
    let shape = data.image_shape();
    let opts = ForwardOptions {
        params_require_grad: true,
        ..Default::default()
    };
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for idx in batch_indices(data.len(), cfg.batch_size, Some((cfg.seed, epoch))) {
        let (mut x, labels) = data.gather(&idx);
        let row = x.row_len();
        for (k, &sample) in idx.iter().enumerate() {
            augment_example(&mut x.data_mut()[k * row..(k + 1) * row], shape, &cfg.augment, cfg.seed, epoch, sample);
        }
        let mut pass = model.forward(&x, Mode::Train, &opts)?;
        let loss = pass.tape.softmax_cross_entropy(pass.logits, &labels)?;
        if !loss.per_sample.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        loss_sum += loss.per_sample.iter().sum::<Real>();
        let probs = loss.probabilities.as_ref().expect("classifier loss");
        correct += (0..labels.len()).filter(|&i| argmax(probs.row(i)) == labels[i]).count();
        pass.tape.backward(&loss)?;
        let grads = pass
            .binder
            .bound_trainable(model.params())
            .map(|(id, v)| Ok((id, pass.tape.grad_wrt(v)?)))
            .collect::<Result<Vec<_>>>()?;
        sgd_momentum_step(model.params_mut(), &grads, state, lr, cfg.momentum)?;
        model.apply_bn_updates(&pass.bn_updates);
    }
    Ok(EpochMetrics {
        epoch,
        lr,
        train_loss: loss_sum / data.len() as Real,
        train_acc: correct as Real / data.len() as Real,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: Real,
    pub accuracy: Real,
    /// N×K softmax probabilities.
    pub probs: Tensor,
    pub per_sample_loss: Vec<Real>,
}

/// Eval-mode loss, accuracy and probabilities, in dataset order.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    evaluate_with(model, data, batch_size, &ForwardOptions::default())
}

/// As [`evaluate`], with custom forward switches (block dropping, early exit).
pub fn evaluate_with(model: &Model, data: &Dataset, batch_size: usize, opts: &ForwardOptions) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let k = model.config().num_classes;
    let mut probs = Vec::with_capacity(data.len() * k);
    let mut per_sample = Vec::with_capacity(data.len());
    let mut correct = 0;
    for idx in batch_indices(data.len(), batch_size, None) {
        let (x, labels) = data.gather(&idx);
        let mut pass = model.forward(&x, Mode::Eval, opts)?;
        let loss = pass.tape.softmax_cross_entropy(pass.logits, &labels)?;
        let p = loss.probabilities.expect("classifier loss");
        correct += (0..labels.len()).filter(|&i| argmax(p.row(i)) == labels[i]).count();
        probs.extend_from_slice(p.data());
        per_sample.extend(loss.per_sample);
    }
    let n = data.len() as Real;
    Ok(Evaluation {
        loss: per_sample.iter().sum::<Real>() / n,
        accuracy: correct as Real / n,
        probs: Tensor::new([data.len(), k], probs)?,
        per_sample_loss: per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn store(v: &[Real]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::FcWeight, Tensor::new([v.len()], v.to_vec()).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn plain_sgd_step() {
        let (mut s, id) = store(&[1.0, 2.0]);
        let mut st = OptimizerState::new(&s);
        let g = Tensor::new([2], vec![0.5, -1.0]).unwrap();
        sgd_momentum_step(&mut s, &[(id, g)], &mut st, 0.1, 0.0).unwrap();
        assert_eq!(s.value(id).data(), &[1.0 - 0.1 * 0.5, 2.0 + 0.1]);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut s, id) = store(&[1.0, 2.0]);
        let mut st = OptimizerState::new(&s);
        sgd_momentum_step(&mut s, &[(id, Tensor::zeros([2]))], &mut st, 0.1, 0.9).unwrap();
        assert_eq!(s.value(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn two_momentum_steps_unrolled_by_hand() {
        let (mut s, id) = store(&[0.0]);
        let mut st = OptimizerState::new(&s);
        let g = 0.3;
        for _ in 0..2 {
            sgd_momentum_step(&mut s, &[(id, Tensor::new([1], vec![g]).unwrap())], &mut st, 0.1, 0.9).unwrap();
        }
        assert!((s.value(id).data()[0] + 0.1 * (g + 1.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = store(&[1.0]);
        let mut st = OptimizerState::new(&s);
        let g = Tensor::new([1], vec![Real::NAN]).unwrap();
        match sgd_momentum_step(&mut s, &[(id, g)], &mut st, 0.1, 0.9) {
            Err(Error::NonFinite(m)) => assert!(m.contains('w')),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.value(id).data(), &[1.0]);
    }

    #[test]
    fn schedule_lookup() {
        let sched = stepwise_schedule(1);
        assert_eq!(lr_at(&sched, 0), 0.1);
        assert_eq!(lr_at(&sched, 39), 0.1);
        assert_eq!(lr_at(&sched, 40), 0.02);
        assert_eq!(lr_at(&sched, 50), 0.02);
        assert_eq!(lr_at(&sched, 79), 0.004);
        assert_eq!(lr_at(&sched, 500), 0.0008);
    }

    #[test]
    fn schedule_validation() {
        let mut cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            momentum: 0.9,
            lr_schedule: stepwise_schedule(1),
            augment: Augment::default(),
            seed: 0,
        };
        cfg.validate().unwrap();
        cfg.lr_schedule[1].until_epoch = Some(40);
        assert!(cfg.validate().is_err());
        cfg.lr_schedule = vec![LrStep { until_epoch: None, lr: 0.0 }];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn augmentation_flip_and_shift() {
        let aug = Augment {
            flip: true,
            translate_pixels: 0,
        };
        let base: Vec<Real> = (0..6).map(|v| v as Real).collect();
        let mut flipped = 0;
        for s in 0..32 {
            let mut img = base.clone();
            augment_example(&mut img, [1, 2, 3], &aug, 1, 0, s);
            if img != base {
                assert_eq!(img, vec![2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
                flipped += 1;
            }
        }
        assert!((8..=24).contains(&flipped));
        let shift = Augment {
            flip: false,
            translate_pixels: 1,
        };
        let mut img = vec![1.0; 9];
        augment_example(&mut img, [1, 3, 3], &shift, 2, 0, 0);
        let zeros = img.iter().filter(|&&v| v == 0.0).count();
        assert!([0, 3, 5].contains(&zeros));
    }
}
