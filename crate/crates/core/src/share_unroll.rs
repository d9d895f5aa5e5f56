//! Weight-shared stages with per-application batch norm, post-hoc unrolling of
//! the last block, and the activation-explosion measurement.

use serde::{Deserialize, Serialize};

use crate::autodiff::{l2, Tensor};
use crate::data::{batch_indices, Dataset};
use crate::nn::{ArchitectureConfig, BlockApp, ForwardOptions, Mode, Model};
use crate::{Error, Real, Result};

/// How batch norm behaves across the applications of a shared block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareBnMode {
    /// One BN state for every application.
    Naive,
    /// Shared gamma/beta, running statistics per application.
    UnsharedStats,
    /// Statistics and gamma/beta per application.
    UbnFull,
}

impl ShareBnMode {
    /// Affine-parameter banks and statistic banks for `apps` applications.
    pub fn bank_counts(self, apps: usize) -> (usize, usize) {
        match self {
            ShareBnMode::Naive => (1, 1),
            ShareBnMode::UnsharedStats => (1, apps),
            ShareBnMode::UbnFull => (apps, apps),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharingSpec {
    /// Zero-based position in each stage from which every application reuses
    /// one weight set. A single entry applies to all stages.
    pub share_from_block: Vec<usize>,
    pub bn_mode: ShareBnMode,
    /// Initial gamma of the shared block's batch norms.
    pub gamma_init_shared: Real,
}

impl SharingSpec {
    pub fn naive(share_from: usize) -> Self {
        SharingSpec {
            share_from_block: vec![share_from],
            bn_mode: ShareBnMode::Naive,
            gamma_init_shared: 1.0,
        }
    }

    pub fn ubn(share_from: usize) -> Self {
        SharingSpec {
            share_from_block: vec![share_from],
            bn_mode: ShareBnMode::UbnFull,
            gamma_init_shared: 0.1,
        }
    }

    pub fn share_from(&self, stage: usize) -> usize {
        match self.share_from_block.as_slice() {
            [one] => *one,
            many => many[stage],
        }
    }

    pub fn validate_for(&self, config: &ArchitectureConfig) -> Result<()> {
        let n = self.share_from_block.len();
        if n != 1 && n != config.stages.len() {
            return Err(Error::Config(format!(
                "share_from_block has {n} entries for {} stages",
                config.stages.len()
            )));
        }
        for (si, stage) in config.stages.iter().enumerate() {
            let from = self.share_from(si);
            if from < 1 || from > stage.blocks {
                return Err(Error::Config(format!(
                    "stage {si}: share_from_block {from} outside 1..={}",
                    stage.blocks
                )));
            }
        }
        if !(self.gamma_init_shared.is_finite() && self.gamma_init_shared > 0.0) {
            return Err(Error::Config(format!("gamma_init_shared {} must be positive", self.gamma_init_shared)));
        }
        Ok(())
    }
}

/// Builds a network whose blocks from `share_from_block` onward reuse one weight set per stage.
pub fn build_shared_model(config: &ArchitectureConfig, spec: &SharingSpec, seed: u64) -> Result<Model> {
    Model::build(config, Some(spec), seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnrollSpec {
    pub extra_steps: usize,
    /// Multiplier on the unrolled block's output before the residual add.
    #[serde(default = "default_alpha")]
    pub alpha: Real,
}

fn default_alpha() -> Real {
    0.5
}

impl Default for UnrollSpec {
    fn default() -> Self {
        UnrollSpec {
            extra_steps: 20,
            alpha: default_alpha(),
        }
    }
}

/// Returns a copy of `model` that applies its last block `extra_steps` more
/// times as `h ← h + alpha·F(h)`. Every new step gets its own batch-norm
/// statistics (sharing the block's gamma/beta), estimated by one pass over
/// `calibration` with batch statistics and then frozen. With zero extra steps
/// the copy is identical to the input.
pub fn unroll_last_block(model: &Model, spec: &UnrollSpec, calibration: &Dataset, batch_size: usize) -> Result<Model> {
    if !(spec.alpha.is_finite() && spec.alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {}", spec.alpha)));
    }
    let mut out = model.clone();
    if spec.extra_steps == 0 {
        return Ok(out);
    }
    let si = out.stages.len() - 1;
    let last = *out.stages[si]
        .schedule
        .last()
        .ok_or_else(|| Error::NotResidualBlock("last stage has no blocks".into()))?;
    let store = &mut out.store;
    let stage = &mut out.stages[si];
    let block = &mut stage.blocks[last.block];
    let source_bank = last.bank.unwrap_or(0);
    let mut new_banks = Vec::with_capacity(spec.extra_steps);
    for _ in 0..spec.extra_steps {
        let mut k = None;
        for (j, layer) in block.bn_layers_mut().into_iter().enumerate() {
            let prefix = format!("stage{si}.block{}.bn{}", last.block, j + 1);
            let src = layer.banks[source_bank];
            let idx = layer.push_stats_bank(store, &prefix, src.gamma, src.beta)?;
            layer.banks[idx].calibrating = true;
            debug_assert!(k.is_none_or(|k| k == idx));
            k = Some(idx);
        }
        new_banks.push(k.expect("two batch-norm layers"));
    }
    for app in stage.schedule.iter_mut().filter(|a| a.block == last.block && a.bank.is_none()) {
        app.bank = Some(0);
    }
    stage.schedule.extend(new_banks.into_iter().map(|k| BlockApp {
        block: last.block,
        bank: Some(k),
        scale: spec.alpha,
    }));
    out.unrolled_steps = model.unrolled_steps + spec.extra_steps;
    calibrate(&mut out, calibration, batch_size)?;
    Ok(out)
}

/// Sets every calibrating bank's statistics to the average of its batch
/// statistics over one ordered pass, then freezes it.
fn calibrate(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("calibration set is empty".into()));
    }
    let mut sums: Vec<(crate::nn::ParamId, crate::nn::ParamId, Vec<f64>, Vec<f64>, usize)> = Vec::new();
    for idx in batch_indices(data.len(), batch_size, None) {
        let (x, _) = data.gather(&idx);
        let pass = model.forward(&x, Mode::Calibrate, &ForwardOptions::default())?;
        for u in pass.bn_updates {
            let pos = match sums.iter().position(|s| s.0 == u.running_mean) {
                Some(p) => p,
                None => {
                    let c = u.stats.mean.len();
                    sums.push((u.running_mean, u.running_var, vec![0.0; c], vec![0.0; c], 0));
                    sums.len() - 1
                }
            };
            let s = &mut sums[pos];
            let w = idx.len() as f64;
            for (acc, v) in s.2.iter_mut().zip(&u.stats.mean) {
                *acc += w * *v as f64;
            }
            for (acc, v) in s.3.iter_mut().zip(&u.stats.var) {
                *acc += w * *v as f64;
            }
            s.4 += idx.len();
        }
    }
    for (mean_id, var_id, m, v, n) in sums {
        let n = n as f64;
        for (dst, src) in model.store.value_mut(mean_id).data_mut().iter_mut().zip(&m) {
            *dst = (src / n) as Real;
        }
        for (dst, src) in model.store.value_mut(var_id).data_mut().iter_mut().zip(&v) {
            *dst = (src / n) as Real;
        }
    }
    for stage in &mut model.stages {
        for block in &mut stage.blocks {
            for layer in block.bn_layers_mut() {
                layer.banks.iter_mut().for_each(|b| b.calibrating = false);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplosionReport {
    /// Batch-mean per-sample ‖h‖ entering each block, then at the head input.
    pub norms: Vec<Real>,
    /// Per stage: geometric mean per-application growth of ‖h‖ from the span
    /// start to the end of the stage.
    pub stage_growth: Vec<Real>,
    /// Largest entry of `stage_growth`.
    pub growth_factor: Real,
}

/// Measures activation norms at every depth and the growth across the span
/// starting at `span_from` in each stage (one entry broadcasts).
pub fn activation_explosion_probe(model: &Model, batch: &Tensor, mode: Mode, span_from: &[usize]) -> Result<ExplosionReport> {
    let pass = model.forward(batch, mode, &ForwardOptions::default())?;
    let mean_norm = |v| {
        let t = pass.tape.value(v);
        let n = t.batch();
        (0..n).map(|i| l2(t.row(i))).sum::<Real>() / n as Real
    };
    let mut norms = Vec::with_capacity(model.num_blocks() + 1);
    for i in 0..model.num_blocks() {
        norms.push(mean_norm(pass.h(i)?));
    }
    norms.push(mean_norm(pass.head_input));
    let mut stage_growth = Vec::new();
    let mut start = 0;
    for (si, stage) in model.stages().iter().enumerate() {
        let len = stage.schedule.len();
        let from = match span_from {
            [] => 0,
            [one] => *one,
            many => *many.get(si).ok_or_else(|| {
                Error::InvalidArgument(format!("span_from has {} entries for {} stages", many.len(), model.stages().len()))
            })?,
        }
        .min(len - 1);
        let steps = (len - from) as Real;
        let end = if si + 1 == model.stages().len() {
            norms[norms.len() - 1]
        } else {
            let h = pass.h(start + len - 1)?;
            let f = pass.f(start + len - 1)?;
            let (h, f) = (pass.tape.value(h), pass.tape.value(f));
            let n = h.batch();
            (0..n)
                .map(|i| l2(&h.row(i).iter().zip(f.row(i)).map(|(a, b)| a + b).collect::<Vec<_>>()))
                .sum::<Real>()
                / n as Real
        };
        stage_growth.push((end / norms[start + from]).powf(1.0 / steps));
        start += len;
    }
    let growth_factor = stage_growth.iter().cloned().fold(0.0, Real::max);
    Ok(ExplosionReport {
        norms,
        stage_growth,
        growth_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, Family, StageSpec};

    fn desk() -> ArchitectureConfig {
        let mut c = ArchitectureConfig::desk(Family::Original);
        c.input_shape = [3, 8, 8];
        for s in &mut c.stages {
            s.blocks = 8;
        }
        c
    }

    #[test]
    fn degenerate_sharing_matches_unshared() {
        let c = desk();
        let full = build_model(&c, 1).unwrap();
        let spec = SharingSpec::ubn(8);
        let shared = build_shared_model(&c, &spec, 1).unwrap();
        assert_eq!(full.trainable_count(), shared.trainable_count());
        assert_eq!(full.params().snapshot(), shared.params().snapshot());
    }

    #[test]
    fn registry_walk_matches_closed_form() {
        let c = desk();
        for mode in [ShareBnMode::Naive, ShareBnMode::UnsharedStats, ShareBnMode::UbnFull] {
            let spec = SharingSpec {
                share_from_block: vec![3],
                bn_mode: mode,
                gamma_init_shared: 0.1,
            };
            let m = build_shared_model(&c, &spec, 2).unwrap();
            let closed = c.parameter_count(Some(&spec)).unwrap();
            assert_eq!(m.params().scalar_count(true), closed.trainable, "{mode:?}");
            assert_eq!(m.params().scalar_count(false), closed.running_stats, "{mode:?}");
        }
    }

    #[test]
    fn count_monotone_in_bn_mode() {
        let c = desk();
        let count = |mode| {
            let s = SharingSpec {
                share_from_block: vec![3],
                bn_mode: mode,
                gamma_init_shared: 0.1,
            };
            c.parameter_count(Some(&s)).unwrap().trainable
        };
        let (n, u, f) = (count(ShareBnMode::Naive), count(ShareBnMode::UnsharedStats), count(ShareBnMode::UbnFull));
        assert!(n <= u && u < f);
        assert!(f < c.parameter_count(None).unwrap().trainable);
    }

    #[test]
    fn share_index_bounds() {
        let c = desk();
        assert!(build_shared_model(&c, &SharingSpec::naive(9), 0).is_err());
        assert!(build_shared_model(&c, &SharingSpec::naive(0), 0).is_err());
        let mut s = SharingSpec::naive(3);
        s.share_from_block = vec![3, 3];
        assert!(build_shared_model(&c, &s, 0).is_err());
    }

    #[test]
    fn ubn_banks_start_at_gamma_init() {
        let c = desk();
        let m = build_shared_model(&c, &SharingSpec::ubn(3), 0).unwrap();
        let stage = &m.stages()[1];
        assert_eq!(stage.blocks.len(), 4);
        assert_eq!(stage.schedule.len(), 8);
        for k in 0..5 {
            let g = m.params().value(stage.blocks[3].bn1.banks[k].gamma);
            assert!(g.data().iter().all(|&v| v == 0.1));
        }
    }

    #[test]
    fn tiny_counts() {
        let c = ArchitectureConfig {
            stages: vec![StageSpec { blocks: 3, channels: 2 }],
            stem_channels: 2,
            input_shape: [1, 2, 2],
            num_classes: 2,
            ..ArchitectureConfig::desk(Family::SingleRepr)
        };
        let m = build_shared_model(&c, &SharingSpec::naive(1), 0).unwrap();
        let unshared = build_model(&c, 0).unwrap();
        let block = 2 * (2 * 2 * 9 + 2) + 2 * 4;
        assert_eq!(unshared.trainable_count() - m.trainable_count(), block);
    }
}
