use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dAttrs, Tape, Tensor, Var};
use crate::nn::batchnorm::{BatchNormLayer, BnUpdate};
use crate::nn::config::{ArchitectureConfig, ShortcutKind};
use crate::nn::params::{ParamId, ParamKind, ParamStore};
use crate::rng::{stream, TAG_INIT};
use crate::share_unroll::{ShareBnMode, SharingSpec};
use crate::{Error, Real, Result};

/// Batch-norm behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics everywhere; running statistics updates are reported.
    Train,
    /// Running statistics everywhere; nothing is reported.
    Eval,
    /// Running statistics, except banks flagged `calibrating`, which use batch
    /// statistics and report them.
    Calibrate,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "eval" => Ok(Mode::Eval),
            "calibrate" => Ok(Mode::Calibrate),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::Calibrate => "calibrate",
        })
    }
}

/// Maps registry entries to tape variables, creating each at most once per
/// tape so that shared parameters accumulate a single gradient.
#[derive(Clone, Debug)]
pub struct ParamBinder {
    vars: Vec<Option<Var>>,
    requires_grad: bool,
}

impl ParamBinder {
    pub fn new(store: &ParamStore, requires_grad: bool) -> Self {
        ParamBinder {
            vars: vec![None; store.len()],
            requires_grad,
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let p = store.get(id);
        let v = if self.requires_grad && p.kind.trainable() {
            tape.param(p.value.clone())?
        } else {
            tape.constant(p.value.clone())?
        };
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Parameters that were bound as gradient-carrying leaves.
    pub fn bound_trainable<'a>(&'a self, store: &'a ParamStore) -> impl Iterator<Item = (ParamId, Var)> + 'a {
        self.vars.iter().enumerate().filter_map(move |(i, v)| {
            let id = ParamId(i);
            v.filter(|_| self.requires_grad && store.get(id).kind.trainable()).map(|v| (id, v))
        })
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero bias. Each weight array
    /// draws from its own stream keyed by its registry position.
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        shape: [usize; 4],
        stride: usize,
        seed: u64,
    ) -> Result<Self> {
        let fan_in = shape[1] * shape[2] * shape[3];
        let w = he_normal(&shape, fan_in, seed, store.len())?;
        let weight = store.add(format!("{prefix}.weight"), ParamKind::ConvWeight, w)?;
        let bias = store.add(format!("{prefix}.bias"), ParamKind::ConvBias, Tensor::zeros([shape[0]]))?;
        Ok(ConvLayer {
            weight,
            bias,
            stride,
            padding: shape[2] / 2,
        })
    }
}

fn he_normal(shape: &[usize], fan_in: usize, seed: u64, slot: usize) -> Result<Tensor> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = stream(seed, &[TAG_INIT, slot as u64]);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(&mut rng) as Real).collect();
    Tensor::new(shape.to_vec(), data)
}

/// BN→ReLU→Conv→BN→ReLU→Conv. The residual add happens in the stage.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub channels: usize,
    pub bn1: BatchNormLayer,
    pub conv1: ConvLayer,
    pub bn2: BatchNormLayer,
    pub conv2: ConvLayer,
}

impl ResidualBlock {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ArchitectureConfig, c: usize, seed: u64) -> Result<Self> {
        Ok(ResidualBlock {
            channels: c,
            bn1: BatchNormLayer::new(store, &format!("{prefix}.bn1"), c, cfg.bn_eps, cfg.bn_momentum)?,
            conv1: ConvLayer::new(store, &format!("{prefix}.conv1"), [c, c, 3, 3], 1, seed)?,
            bn2: BatchNormLayer::new(store, &format!("{prefix}.bn2"), c, cfg.bn_eps, cfg.bn_momentum)?,
            conv2: ConvLayer::new(store, &format!("{prefix}.conv2"), [c, c, 3, 3], 1, seed)?,
        })
    }

    pub(crate) fn bn_layers_mut(&mut self) -> [&mut BatchNormLayer; 2] {
        [&mut self.bn1, &mut self.bn2]
    }
}

/// Layer between consecutive stages (or between the stem and a wider first stage).
#[derive(Clone, Debug)]
pub enum Transition {
    Conv(ConvLayer),
    Pool,
    Projection {
        shortcut: ConvLayer,
        bn1: BatchNormLayer,
        conv1: ConvLayer,
        bn2: BatchNormLayer,
        conv2: ConvLayer,
    },
}

/// One application of a block definition inside a stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockApp {
    /// Index into [`Stage::blocks`].
    pub block: usize,
    /// Batch-norm bank; `None` for layers with a single bank.
    pub bank: Option<usize>,
    /// Multiplier on the block output.
    pub scale: Real,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub channels: usize,
    pub transition: Option<Transition>,
    /// Distinct weight sets. Shared stages hold fewer definitions than applications.
    pub blocks: Vec<ResidualBlock>,
    pub schedule: Vec<BlockApp>,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub bn: BatchNormLayer,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub(crate) config: ArchitectureConfig,
    pub(crate) sharing: Option<SharingSpec>,
    pub(crate) seed: u64,
    pub(crate) store: ParamStore,
    pub(crate) stem: ConvLayer,
    pub(crate) stages: Vec<Stage>,
    pub(crate) head: Head,
    pub(crate) unrolled_steps: usize,
}

/// Switches for a single forward pass. Block indices are global application
/// indices counted across stages.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Bind trainable parameters as gradient leaves.
    pub params_require_grad: bool,
    /// Retain gradients at every block input and at the head input.
    pub retain_h: bool,
    /// Retain the gradient at the stem output.
    pub retain_stem: bool,
    /// Record the input of every ReLU evaluated.
    pub record_relus: bool,
    /// Replace this block by the identity.
    pub skip_block: Option<usize>,
    /// Feed the residual stream after this block straight into the head.
    pub exit_after: Option<usize>,
    /// Start from this tensor in place of the residual stream after the given
    /// block; earlier layers are not evaluated. The leaf is retained.
    pub inject_after: Option<(usize, Tensor)>,
}

/// Everything recorded by [`Model::forward`].
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    /// Residual stream entering each block (`None` for blocks not reached).
    pub h: Vec<Option<Var>>,
    /// Scaled block outputs, so that `h[i + 1] = h[i] + f[i]` inside a stage.
    pub f: Vec<Option<Var>>,
    /// Input to the classifier head.
    pub head_input: Var,
    pub stem_out: Option<Var>,
    pub injected: Option<Var>,
    pub bn_updates: Vec<BnUpdate>,
    pub relus: Vec<Var>,
    pub binder: ParamBinder,
}

impl ForwardPass {
    pub fn h(&self, i: usize) -> Result<Var> {
        self.h
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::InvalidArgument(format!("block {i} input was not computed")))
    }

    pub fn f(&self, i: usize) -> Result<Var> {
        self.f
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::InvalidArgument(format!("block {i} output was not computed")))
    }
}

/// Materialized result of [`Model::forward_collect`].
#[derive(Clone, Debug)]
pub struct Collected {
    pub logits: Tensor,
    pub h: Vec<Tensor>,
    pub f: Vec<Tensor>,
    pub head_input: Tensor,
}

struct Builder<'m> {
    store: &'m ParamStore,
    tape: Tape,
    binder: ParamBinder,
    mode: Mode,
    updates: Vec<BnUpdate>,
    relus: Option<Vec<Var>>,
}

impl Builder<'_> {
    fn conv(&mut self, l: &ConvLayer, x: Var) -> Result<Var> {
        let w = self.binder.bind(&mut self.tape, self.store, l.weight)?;
        let b = self.binder.bind(&mut self.tape, self.store, l.bias)?;
        self.tape.conv2d(
            x,
            w,
            Some(b),
            Conv2dAttrs {
                stride: l.stride,
                padding: l.padding,
            },
        )
    }

    fn bn(&mut self, l: &BatchNormLayer, x: Var, step: Option<usize>) -> Result<Var> {
        let (y, u) = l.forward(&mut self.tape, self.store, &mut self.binder, x, self.mode, step)?;
        self.updates.extend(u);
        Ok(y)
    }

    fn relu(&mut self, x: Var) -> Result<Var> {
        if let Some(r) = self.relus.as_mut() {
            r.push(x);
        }
        self.tape.relu(x)
    }

    fn block(&mut self, b: &ResidualBlock, x: Var, bank: Option<usize>) -> Result<Var> {
        let y = self.bn(&b.bn1, x, bank)?;
        let y = self.relu(y)?;
        let y = self.conv(&b.conv1, y)?;
        let y = self.bn(&b.bn2, y, bank)?;
        let y = self.relu(y)?;
        self.conv(&b.conv2, y)
    }

    fn transition(&mut self, t: &Transition, x: Var) -> Result<Var> {
        match t {
            Transition::Conv(c) => self.conv(c, x),
            Transition::Pool => self.tape.avg_pool2d(x, 2, 2),
            Transition::Projection {
                shortcut,
                bn1,
                conv1,
                bn2,
                conv2,
            } => {
                let s = self.conv(shortcut, x)?;
                let y = self.bn(bn1, x, None)?;
                let y = self.relu(y)?;
                let y = self.conv(conv1, y)?;
                let y = self.bn(bn2, y, None)?;
                let y = self.relu(y)?;
                let y = self.conv(conv2, y)?;
                self.tape.add(s, y)
            }
        }
    }

    fn head(&mut self, head: &Head, x: Var) -> Result<Var> {
        let y = self.bn(&head.bn, x, None)?;
        let y = self.relu(y)?;
        let s = self.tape.shape(y).to_vec();
        let y = self.tape.avg_pool2d(y, s[2], s[3])?;
        let y = self.tape.flatten(y)?;
        let w = self.binder.bind(&mut self.tape, self.store, head.fc_weight)?;
        let b = self.binder.bind(&mut self.tape, self.store, head.fc_bias)?;
        let y = self.tape.matmul(y, w)?;
        self.tape.bias_add(y, b)
    }
}

/// Builds an unshared network with He-normal initialization.
pub fn build_model(config: &ArchitectureConfig, seed: u64) -> Result<Model> {
    Model::build(config, None, seed)
}

impl Model {
    pub(crate) fn build(config: &ArchitectureConfig, sharing: Option<&SharingSpec>, seed: u64) -> Result<Model> {
        config.validate()?;
        if let Some(s) = sharing {
            s.validate_for(config)?;
        }
        let mut store = ParamStore::new();
        let cin = config.input_shape[0];
        let stem = ConvLayer::new(&mut store, "stem.conv", [config.stem_channels, cin, 3, 3], 1, seed)?;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (si, spec) in config.stages.iter().enumerate() {
            let c = spec.channels;
            let prev = config.stage_input_channels(si);
            let stride = if si == 0 { 1 } else { 2 };
            let transition = if !config.has_transition(si) {
                None
            } else {
                let p = format!("stage{si}.transition");
                Some(match config.shortcut {
                    ShortcutKind::Conv1x1 => Transition::Conv(ConvLayer::new(
                        &mut store,
                        &format!("{p}.conv"),
                        [c, prev, 1, 1],
                        stride,
                        seed,
                    )?),
                    ShortcutKind::Pool => Transition::Pool,
                    ShortcutKind::Projection => Transition::Projection {
                        shortcut: ConvLayer::new(&mut store, &format!("{p}.shortcut"), [c, prev, 1, 1], stride, seed)?,
                        bn1: BatchNormLayer::new(&mut store, &format!("{p}.bn1"), prev, config.bn_eps, config.bn_momentum)?,
                        conv1: ConvLayer::new(&mut store, &format!("{p}.conv1"), [c, prev, 3, 3], stride, seed)?,
                        bn2: BatchNormLayer::new(&mut store, &format!("{p}.bn2"), c, config.bn_eps, config.bn_momentum)?,
                        conv2: ConvLayer::new(&mut store, &format!("{p}.conv2"), [c, c, 3, 3], 1, seed)?,
                    },
                    ShortcutKind::None => unreachable!("validated: no transition without a shortcut"),
                })
            };
            let share_from = sharing.map(|s| s.share_from(si)).unwrap_or(spec.blocks).min(spec.blocks);
            let distinct = if share_from < spec.blocks { share_from + 1 } else { spec.blocks };
            let mut blocks = Vec::with_capacity(distinct);
            for b in 0..distinct {
                blocks.push(ResidualBlock::new(&mut store, &format!("stage{si}.block{b}"), config, c, seed)?);
            }
            let mut schedule: Vec<BlockApp> = (0..share_from)
                .map(|b| BlockApp {
                    block: b,
                    bank: None,
                    scale: 1.0,
                })
                .collect();
            if let (Some(s), true) = (sharing, share_from < spec.blocks) {
                let apps = spec.blocks - share_from;
                let shared = &mut blocks[share_from];
                for (k, layer) in shared.bn_layers_mut().into_iter().enumerate() {
                    let prefix = format!("stage{si}.block{share_from}.bn{}", k + 1);
                    let b0 = layer.banks[0];
                    store.value_mut(b0.gamma).data_mut().fill(s.gamma_init_shared);
                    for _ in 1..apps {
                        match s.bn_mode {
                            ShareBnMode::Naive => {}
                            ShareBnMode::UnsharedStats => {
                                layer.push_stats_bank(&mut store, &prefix, b0.gamma, b0.beta)?;
                            }
                            ShareBnMode::UbnFull => {
                                layer.push_full_bank(&mut store, &prefix, s.gamma_init_shared)?;
                            }
                        }
                    }
                }
                let banked = s.bn_mode != ShareBnMode::Naive;
                schedule.extend((0..apps).map(|k| BlockApp {
                    block: share_from,
                    bank: banked.then_some(k),
                    scale: 1.0,
                }));
            }
            stages.push(Stage {
                channels: c,
                transition,
                blocks,
                schedule,
            });
        }
        let last = config.stages.last().map(|s| s.channels).unwrap_or(0);
        let bn = BatchNormLayer::new(&mut store, "head.bn", last, config.bn_eps, config.bn_momentum)?;
        let w = he_normal(&[last, config.num_classes], last, seed, store.len())?;
        let fc_weight = store.add("head.fc.weight", ParamKind::FcWeight, w)?;
        let fc_bias = store.add("head.fc.bias", ParamKind::FcBias, Tensor::zeros([config.num_classes]))?;
        Ok(Model {
            config: config.clone(),
            sharing: sharing.cloned(),
            seed,
            store,
            stem,
            stages,
            head: Head { bn, fc_weight, fc_bias },
            unrolled_steps: 0,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn sharing(&self) -> Option<&SharingSpec> {
        self.sharing.as_ref()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stem(&self) -> &ConvLayer {
        &self.stem
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Extra applications appended by unrolling (zero for trained models).
    pub fn unrolled_steps(&self) -> usize {
        self.unrolled_steps
    }

    pub fn trainable_count(&self) -> usize {
        self.store.scalar_count(true)
    }

    /// Total block applications across all stages.
    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.schedule.len()).sum()
    }

    /// Stage index and position within that stage of a global block index.
    pub fn locate(&self, block: usize) -> Result<(usize, usize)> {
        let mut rest = block;
        for (si, s) in self.stages.iter().enumerate() {
            if rest < s.schedule.len() {
                return Ok((si, rest));
            }
            rest -= s.schedule.len();
        }
        Err(Error::NotResidualBlock(format!(
            "index {block} (the model has {} residual blocks)",
            self.num_blocks()
        )))
    }

    /// Global indices of the blocks in the final stage.
    pub fn last_stage_blocks(&self) -> std::ops::Range<usize> {
        let n = self.num_blocks();
        n - self.stages.last().map(|s| s.schedule.len()).unwrap_or(0)..n
    }

    pub fn block_app(&self, block: usize) -> Result<(&ResidualBlock, BlockApp)> {
        let (si, pos) = self.locate(block)?;
        let app = self.stages[si].schedule[pos];
        Ok((&self.stages[si].blocks[app.block], app))
    }

    /// Zeroes the last convolution of the block applied at `block`, making its
    /// output exactly zero. Shared definitions affect every application.
    pub fn zero_block_output(&mut self, block: usize) -> Result<()> {
        let (b, _) = self.block_app(block)?;
        let (w, bias) = (b.conv2.weight, b.conv2.bias);
        self.store.value_mut(w).data_mut().fill(0.0);
        self.store.value_mut(bias).data_mut().fill(0.0);
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.config.input_shape {
            return Err(Error::shape(
                "forward",
                format!("batch {s:?} does not match input shape {:?}", self.config.input_shape),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, opts: &ForwardOptions) -> Result<ForwardPass> {
        let n_blocks = self.num_blocks();
        for (what, b) in [("skip", opts.skip_block), ("exit", opts.exit_after)] {
            if let Some(b) = b {
                self.locate(b).map_err(|_| {
                    Error::NotResidualBlock(format!("{what} target {b} (the model has {n_blocks} residual blocks)"))
                })?;
            }
        }
        if let Some(e) = opts.exit_after {
            if !self.last_stage_blocks().contains(&e) {
                return Err(Error::shape(
                    "forward",
                    format!("the head only accepts final-stage representations; block {e} lies in an earlier stage"),
                ));
            }
        }
        let mut b = Builder {
            store: &self.store,
            tape: Tape::new(),
            binder: ParamBinder::new(&self.store, opts.params_require_grad),
            mode,
            updates: Vec::new(),
            relus: opts.record_relus.then(Vec::new),
        };
        let mut h = vec![None; n_blocks];
        let mut f = vec![None; n_blocks];
        let mut stem_out = None;
        let mut injected = None;
        let (mut cur, start) = match &opts.inject_after {
            Some((i, t)) => {
                let (si, pos) = self.locate(*i)?;
                let (hh, ww) = self.config.stage_extent(si);
                let want = [self.stages[si].channels, hh, ww];
                if t.shape().len() != 4 || t.shape()[1..] != want {
                    return Err(Error::shape(
                        "forward",
                        format!("injected tensor {:?} after block {i} expects [N, {want:?}]", t.shape()),
                    ));
                }
                let v = b.tape.leaf(t.detach(), true)?;
                b.tape.retain(v)?;
                injected = Some(v);
                (v, (si, pos + 1))
            }
            None => {
                self.check_input(x)?;
                let xv = b.tape.constant(x.detach())?;
                let s = b.conv(&self.stem, xv)?;
                if opts.retain_stem {
                    b.tape.retain(s)?;
                }
                stem_out = Some(s);
                (s, (0, 0))
            }
        };
        let mut global = 0;
        'stages: for (si, stage) in self.stages.iter().enumerate() {
            if si < start.0 {
                global += stage.schedule.len();
                continue;
            }
            if si > start.0 || start.1 == 0 {
                if let Some(t) = &stage.transition {
                    cur = b.transition(t, cur)?;
                }
            }
            for (pos, app) in stage.schedule.iter().enumerate() {
                let i = global + pos;
                if si == start.0 && pos < start.1 {
                    continue;
                }
                if opts.retain_h {
                    b.tape.retain(cur)?;
                }
                h[i] = Some(cur);
                if opts.skip_block != Some(i) {
                    let out = b.block(&stage.blocks[app.block], cur, app.bank)?;
                    let out = if app.scale == 1.0 { out } else { b.tape.scale(out, app.scale)? };
                    f[i] = Some(out);
                    cur = b.tape.add(cur, out)?;
                }
                if opts.exit_after == Some(i) {
                    break 'stages;
                }
            }
            global += stage.schedule.len();
        }
        if opts.retain_h {
            b.tape.retain(cur)?;
        }
        let logits = b.head(&self.head, cur)?;
        Ok(ForwardPass {
            tape: b.tape,
            logits,
            h,
            f,
            head_input: cur,
            stem_out,
            injected,
            bn_updates: b.updates,
            relus: b.relus.unwrap_or_default(),
            binder: b.binder,
        })
    }

    /// Runs a forward pass and returns logits, every block input `h[i]` and
    /// every block output `F[i]`. Train mode updates running statistics.
    pub fn forward_collect(&mut self, x: &Tensor, mode: Mode) -> Result<Collected> {
        let pass = self.forward(x, mode, &ForwardOptions::default())?;
        let get = |v: &Option<Var>| v.map(|v| pass.tape.tensor(v).detach());
        let out = Collected {
            logits: pass.tape.tensor(pass.logits).detach(),
            h: pass.h.iter().filter_map(get).collect(),
            f: pass.f.iter().filter_map(get).collect(),
            head_input: pass.tape.tensor(pass.head_input).detach(),
        };
        if mode != Mode::Eval {
            self.apply_bn_updates(&pass.bn_updates);
        }
        Ok(out)
    }

    /// Applies the classifier head alone to a final-stage representation.
    pub fn head_logits(&self, h: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.stages.last().map(|s| s.channels).unwrap_or(0);
        let (hh, ww) = self.config.stage_extent(self.stages.len() - 1);
        if h.shape().len() != 4 || h.shape()[1..] != [c, hh, ww] {
            return Err(Error::shape(
                "head",
                format!("representation {:?} does not match [N, {c}, {hh}, {ww}]", h.shape()),
            ));
        }
        let mut b = Builder {
            store: &self.store,
            tape: Tape::new(),
            binder: ParamBinder::new(&self.store, false),
            mode,
            updates: Vec::new(),
            relus: None,
        };
        let x = b.tape.constant(h.detach())?;
        let y = b.head(&self.head, x)?;
        Ok(b.tape.tensor(y).detach())
    }

    /// Exponential moving average update of running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let m = self.config.bn_momentum;
        for u in updates {
            for (id, batch) in [(u.running_mean, &u.stats.mean), (u.running_var, &u.stats.var)] {
                for (r, b) in self.store.value_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::{Family, StageSpec};

    pub(crate) fn tiny(family: Family) -> ArchitectureConfig {
        let mut c = ArchitectureConfig::desk(family);
        c.input_shape = [2, 8, 8];
        for s in &mut c.stages {
            s.blocks = 2;
            s.channels = s.channels.min(8);
        }
        if family == Family::Original || family == Family::Wide {
            c.stages[0].channels = 4;
            c.stages[1].channels = 6;
            c.stages[2].channels = 8;
        }
        c.stem_channels = c.stages[0].channels;
        c
    }

    fn batch(c: &ArchitectureConfig, n: usize) -> Tensor {
        let [ch, h, w] = c.input_shape;
        Tensor::from_fn([n, ch, h, w], |i| ((i * 37 % 101) as Real / 50.0 - 1.0) * 1.5)
    }

    #[test]
    fn registry_count_matches_closed_form() {
        for f in [Family::Original, Family::SingleRepr, Family::AvgPool, Family::Wide] {
            let c = tiny(f);
            let m = build_model(&c, 1).unwrap();
            let p = c.parameter_count(None).unwrap();
            assert_eq!(m.params().scalar_count(true), p.trainable, "{f:?}");
            assert_eq!(m.params().scalar_count(false), p.running_stats, "{f:?}");
        }
    }

    #[test]
    fn tiny_single_repr_hand_count() {
        let c = ArchitectureConfig {
            family: Family::SingleRepr,
            stages: vec![StageSpec { blocks: 4, channels: 8 }],
            stem_channels: 8,
            input_shape: [1, 16, 16],
            num_classes: 10,
            shortcut: ShortcutKind::None,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        };
        let stem = 8 * 9 + 8;
        let block = 2 * (8 * 8 * 9 + 8) + 2 * 16;
        let head = 16 + 8 * 10 + 10;
        let m = build_model(&c, 3).unwrap();
        assert_eq!(m.trainable_count(), stem + 4 * block + head);
    }

    #[test]
    fn same_seed_same_parameters() {
        let c = tiny(Family::Original);
        let a = build_model(&c, 9).unwrap().params().snapshot();
        let b = build_model(&c, 9).unwrap().params().snapshot();
        let d = build_model(&c, 10).unwrap().params().snapshot();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_ne!(a, d);
    }

    #[test]
    fn shapes_and_additive_decomposition() {
        for f in [Family::Original, Family::SingleRepr, Family::AvgPool, Family::Wide] {
            let c = tiny(f);
            let mut m = build_model(&c, 2).unwrap();
            let out = m.forward_collect(&batch(&c, 3), Mode::Train).unwrap();
            assert_eq!(out.logits.shape(), &[3, c.num_classes]);
            assert_eq!(out.h.len(), m.num_blocks());
            let mut i = 0;
            for (si, s) in m.stages().iter().enumerate() {
                for pos in 0..s.schedule.len() {
                    assert_eq!(out.f[i].shape(), out.h[i].shape());
                    let next = if pos + 1 < s.schedule.len() { &out.h[i + 1] } else if si + 1 == m.stages().len() { &out.head_input } else { i += 1; continue };
                    for ((a, b), d) in next.data().iter().zip(out.h[i].data()).zip(out.f[i].data()) {
                        assert!((a - b - d).abs() <= 1e-12 * (1.0 + a.abs()));
                    }
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn eval_is_pure_and_repeatable() {
        let c = tiny(Family::AvgPool);
        let mut m = build_model(&c, 4).unwrap();
        let x = batch(&c, 4);
        m.forward_collect(&x, Mode::Train).unwrap();
        let before = m.params().snapshot();
        let a = m.forward_collect(&x, Mode::Eval).unwrap();
        let b = m.forward_collect(&x, Mode::Eval).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        assert_eq!(before, m.params().snapshot());
    }

    #[test]
    fn train_mode_moves_running_statistics() {
        let c = tiny(Family::SingleRepr);
        let mut m = build_model(&c, 4).unwrap();
        let before = m.params().snapshot();
        m.forward_collect(&batch(&c, 4), Mode::Train).unwrap();
        assert_ne!(before, m.params().snapshot());
    }

    #[test]
    fn zeroed_blocks_are_identity() {
        let c = tiny(Family::SingleRepr);
        let mut m = build_model(&c, 5).unwrap();
        for i in 0..m.num_blocks() {
            m.zero_block_output(i).unwrap();
        }
        let out = m.forward_collect(&batch(&c, 2), Mode::Eval).unwrap();
        for (i, f) in out.f.iter().enumerate() {
            assert!(f.data().iter().all(|v| *v == 0.0));
            if i + 1 < out.h.len() {
                assert_eq!(out.h[i + 1].data(), out.h[i].data());
            }
        }
    }

    #[test]
    fn head_reconstructs_pipeline_logits() {
        let c = tiny(Family::Original);
        let m = build_model(&c, 6).unwrap();
        let x = batch(&c, 3);
        let p = m.forward(&x, Mode::Eval, &ForwardOptions::default()).unwrap();
        let re = m.head_logits(&p.tape.tensor(p.head_input), Mode::Eval).unwrap();
        assert_eq!(re.data(), p.tape.value(p.logits).data());
    }

    #[test]
    fn injection_after_a_block_reproduces_the_tail() {
        let c = tiny(Family::Original);
        let m = build_model(&c, 7).unwrap();
        let x = batch(&c, 2);
        let full = m.forward(&x, Mode::Eval, &ForwardOptions::default()).unwrap();
        for i in 0..m.num_blocks() {
            let after = match full.h.get(i + 1).copied().flatten() {
                Some(v) if m.locate(i + 1).unwrap().0 == m.locate(i).unwrap().0 => full.tape.tensor(v),
                _ => {
                    let hi = full.tape.tensor(full.h(i).unwrap());
                    let fi = full.tape.tensor(full.f(i).unwrap());
                    Tensor::from_fn(hi.shape().to_vec(), |k| hi.data()[k] + fi.data()[k])
                }
            };
            let opts = ForwardOptions {
                inject_after: Some((i, after)),
                ..Default::default()
            };
            let tail = m.forward(&x, Mode::Eval, &opts).unwrap();
            let a = tail.tape.value(tail.logits).data();
            let b = full.tape.value(full.logits).data();
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() < 1e-12, "block {i}");
            }
        }
    }

    #[test]
    fn exit_outside_final_stage_is_rejected() {
        let c = tiny(Family::Original);
        let m = build_model(&c, 1).unwrap();
        let opts = ForwardOptions {
            exit_after: Some(0),
            ..Default::default()
        };
        assert!(matches!(m.forward(&batch(&c, 1), Mode::Eval, &opts), Err(Error::Shape { .. })));
        assert!("dream".parse::<Mode>().is_err());
    }

    #[test]
    fn he_init_variance() {
        let mut c = ArchitectureConfig::desk(Family::SingleRepr);
        c.stem_channels = 64;
        c.stages[0].channels = 64;
        c.input_shape = [32, 8, 8];
        let m = build_model(&c, 11).unwrap();
        let w = m.params().value(m.stem().weight).data();
        let var = w.iter().map(|v| v * v).sum::<Real>() / w.len() as Real;
        let want = 2.0 / (32.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.1, "{var} vs {want}");
    }
}
