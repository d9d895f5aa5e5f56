//! Architecture description and closed-form parameter counting.

use serde::{Deserialize, Serialize};

use crate::share_unroll::{ShareBnMode, SharingSpec};
use crate::{Error, Real, Result};

pub const DEFAULT_BN_EPS: Real = 1e-5;
pub const DEFAULT_BN_MOMENTUM: Real = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Stages of increasing width joined by strided 1×1 shortcut convolutions.
    Original,
    /// A single stage; every hidden representation has the input's spatial size.
    SingleRepr,
    /// Equal-width stages joined by 2×2 average pooling.
    AvgPool,
    /// Like `Original` with much wider stages.
    Wide,
}

/// Layer inserted between consecutive stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutKind {
    /// 1×1 convolution with stride 2 (stride 1 when entering the first stage).
    Conv1x1,
    /// 2×2 average pooling.
    Pool,
    None,
    /// Pre-activation projection unit: a strided 1×1 convolution on the
    /// identity path plus a BN→ReLU→Conv→BN→ReLU→Conv branch that changes width.
    Projection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Shape-preserving residual blocks in the stage.
    pub blocks: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub family: Family,
    pub stages: Vec<StageSpec>,
    pub stem_channels: usize,
    /// Channels, height, width of one input example.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub shortcut: ShortcutKind,
    #[serde(default = "default_eps")]
    pub bn_eps: Real,
    #[serde(default = "default_momentum")]
    pub bn_momentum: Real,
}

fn default_eps() -> Real {
    DEFAULT_BN_EPS
}

fn default_momentum() -> Real {
    DEFAULT_BN_MOMENTUM
}

/// Parameter totals split into trainable values and batch-norm running statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub running_stats: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trainable + self.running_stats
    }

    fn conv(&mut self, k: usize, cin: usize, cout: usize) {
        self.trainable += k * k * cin * cout + cout;
    }

    fn bn(&mut self, c: usize, affine_banks: usize, stat_banks: usize) {
        self.trainable += 2 * c * affine_banks;
        self.running_stats += 2 * c * stat_banks;
    }
}

impl ArchitectureConfig {
    /// Desk-scale defaults for each family (minutes to train on one core).
    pub fn desk(family: Family) -> Self {
        let (stages, stem, shortcut) = match family {
            Family::SingleRepr => (vec![StageSpec { blocks: 8, channels: 16 }], 16, ShortcutKind::None),
            Family::Original => (
                vec![
                    StageSpec { blocks: 4, channels: 8 },
                    StageSpec { blocks: 4, channels: 16 },
                    StageSpec { blocks: 4, channels: 32 },
                ],
                8,
                ShortcutKind::Conv1x1,
            ),
            Family::AvgPool => (vec![StageSpec { blocks: 4, channels: 16 }; 3], 16, ShortcutKind::Pool),
            Family::Wide => (
                vec![
                    StageSpec { blocks: 4, channels: 16 },
                    StageSpec { blocks: 4, channels: 24 },
                    StageSpec { blocks: 4, channels: 32 },
                ],
                16,
                ShortcutKind::Conv1x1,
            ),
        };
        ArchitectureConfig {
            family,
            stages,
            stem_channels: stem,
            input_shape: [3, 32, 32],
            num_classes: 10,
            shortcut,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    /// Full-size CIFAR-10 configurations, used for parameter counting only.
    ///
    /// Stages of the `original` and `wide` families open with a projection
    /// unit, which is not counted in `StageSpec::blocks`.
    pub fn paper_scale(family: Family) -> Self {
        let (stages, stem, shortcut) = match family {
            Family::Original => (
                vec![
                    StageSpec { blocks: 18, channels: 16 },
                    StageSpec { blocks: 17, channels: 32 },
                    StageSpec { blocks: 17, channels: 64 },
                ],
                16,
                ShortcutKind::Projection,
            ),
            Family::SingleRepr => (
                vec![StageSpec { blocks: 10, channels: 100 }],
                100,
                ShortcutKind::None,
            ),
            Family::AvgPool => (vec![StageSpec { blocks: 10, channels: 150 }; 3], 150, ShortcutKind::Pool),
            Family::Wide => (
                vec![
                    StageSpec { blocks: 3, channels: 160 },
                    StageSpec { blocks: 4, channels: 320 },
                    StageSpec { blocks: 4, channels: 640 },
                ],
                16,
                ShortcutKind::Projection,
            ),
        };
        ArchitectureConfig {
            family,
            stages,
            stem_channels: stem,
            input_shape: [3, 32, 32],
            num_classes: 10,
            shortcut,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    /// Pre-activation resnet of depth `6n + 2` in the `original` family
    /// (`n` residual units per stage, the first unit of stages 2 and 3 being a projection).
    pub fn resnet_depth(n: usize) -> Self {
        let mut c = Self::paper_scale(Family::Original);
        c.stages = vec![
            StageSpec { blocks: n, channels: 16 },
            StageSpec { blocks: n - 1, channels: 32 },
            StageSpec { blocks: n - 1, channels: 64 },
        ];
        c
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if let Some((i, s)) = self
            .stages
            .iter()
            .enumerate()
            .find(|(_, s)| s.blocks == 0 || s.channels == 0)
        {
            return bad(format!("stage {i} has {} blocks of {} channels", s.blocks, s.channels));
        }
        if self.input_shape.iter().any(|&d| d == 0) || self.num_classes < 2 || self.stem_channels == 0 {
            return bad(format!(
                "input shape {:?}, {} classes, {} stem channels",
                self.input_shape, self.num_classes, self.stem_channels
            ));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad(format!(
                "batch norm eps {} / momentum {} out of range",
                self.bn_eps, self.bn_momentum
            ));
        }
        match self.family {
            Family::SingleRepr => {
                if self.stages.len() != 1 || self.shortcut != ShortcutKind::None {
                    return bad("single_repr needs exactly one stage and no shortcut".into());
                }
            }
            Family::AvgPool => {
                if self.shortcut != ShortcutKind::Pool {
                    return bad("avg_pool joins stages with 2x2 average pooling".into());
                }
            }
            Family::Original | Family::Wide => {
                if !matches!(self.shortcut, ShortcutKind::Conv1x1 | ShortcutKind::Projection) {
                    return bad(format!("{:?} uses convolutional shortcuts", self.family));
                }
            }
        }
        if self.shortcut == ShortcutKind::None && self.stages.len() > 1 {
            return bad("several stages need a shortcut between them".into());
        }
        if self.shortcut == ShortcutKind::Pool {
            if let Some(s) = self.stages.iter().find(|s| s.channels != self.stages[0].channels) {
                return bad(format!(
                    "pooling cannot change width ({} -> {} channels)",
                    self.stages[0].channels, s.channels
                ));
            }
        }
        if self.shortcut != ShortcutKind::Projection && self.stem_channels != self.stages[0].channels {
            return bad(format!(
                "stem has {} channels but the first stage expects {}",
                self.stem_channels, self.stages[0].channels
            ));
        }
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for _ in 1..self.stages.len() {
            if self.shortcut == ShortcutKind::Pool && (h % 2 != 0 || w % 2 != 0) {
                return bad(format!("cannot pool a {h}x{w} representation"));
            }
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        Ok(())
    }

    /// Spatial extent of the representation inside each stage.
    pub fn stage_extent(&self, stage: usize) -> (usize, usize) {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for _ in 0..stage {
            if self.shortcut != ShortcutKind::None {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
        }
        (h, w)
    }

    /// Whether a transition layer precedes `stage`.
    pub(crate) fn has_transition(&self, stage: usize) -> bool {
        match self.shortcut {
            ShortcutKind::None => false,
            ShortcutKind::Pool | ShortcutKind::Conv1x1 => stage > 0,
            ShortcutKind::Projection => stage > 0 || self.stem_channels != self.stages[0].channels,
        }
    }

    pub(crate) fn stage_input_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.stem_channels
        } else {
            self.stages[stage - 1].channels
        }
    }

    /// Counts parameters from the configuration alone, without allocating a network.
    pub fn parameter_count(&self, sharing: Option<&SharingSpec>) -> Result<ParamCount> {
        self.validate()?;
        if let Some(s) = sharing {
            s.validate_for(self)?;
        }
        let mut p = ParamCount::default();
        p.conv(3, self.input_shape[0], self.stem_channels);
        for (si, stage) in self.stages.iter().enumerate() {
            let c = stage.channels;
            if self.has_transition(si) {
                let cin = self.stage_input_channels(si);
                match self.shortcut {
                    ShortcutKind::Conv1x1 => p.conv(1, cin, c),
                    ShortcutKind::Projection => {
                        p.conv(1, cin, c);
                        p.bn(cin, 1, 1);
                        p.conv(3, cin, c);
                        p.bn(c, 1, 1);
                        p.conv(3, c, c);
                    }
                    ShortcutKind::Pool | ShortcutKind::None => {}
                }
            }
            let (unique, applications) = match sharing {
                Some(s) => {
                    let from = s.share_from(si);
                    if from >= stage.blocks {
                        (stage.blocks, 0)
                    } else {
                        (from, stage.blocks - from)
                    }
                }
                None => (stage.blocks, 0),
            };
            for _ in 0..unique {
                p.conv(3, c, c);
                p.conv(3, c, c);
                p.bn(c, 1, 1);
                p.bn(c, 1, 1);
            }
            if applications > 0 {
                let mode = sharing.map(|s| s.bn_mode).unwrap_or(ShareBnMode::Naive);
                let (affine, stats) = mode.bank_counts(applications);
                p.conv(3, c, c);
                p.conv(3, c, c);
                p.bn(c, affine, stats);
                p.bn(c, affine, stats);
            }
        }
        let last = self.stages.last().map(|s| s.channels).unwrap_or(0);
        p.bn(last, 1, 1);
        p.trainable += last * self.num_classes + self.num_classes;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_presets_validate() {
        for f in [Family::Original, Family::SingleRepr, Family::AvgPool, Family::Wide] {
            ArchitectureConfig::desk(f).validate().unwrap();
            ArchitectureConfig::paper_scale(f).validate().unwrap();
        }
    }

    #[test]
    fn inconsistent_channel_chain_rejected() {
        let mut c = ArchitectureConfig::desk(Family::Original);
        c.stem_channels = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ArchitectureConfig::desk(Family::AvgPool);
        c.stages[1].channels = 32;
        assert!(c.validate().is_err());
        let mut c = ArchitectureConfig::desk(Family::SingleRepr);
        c.stages.push(c.stages[0]);
        assert!(c.validate().is_err());
    }

    // Text figures include batch-norm running statistics in the total.
    #[test]
    fn wide_full_scale_total() {
        let c = ArchitectureConfig::paper_scale(Family::Wide);
        assert_eq!(c.parameter_count(None).unwrap().total(), 45_732_842);
    }

    #[test]
    fn other_full_scale_totals() {
        let r110 = ArchitectureConfig::paper_scale(Family::Original);
        assert_eq!(r110.parameter_count(None).unwrap().total(), 1_742_762);
        let pool = ArchitectureConfig::paper_scale(Family::AvgPool);
        assert_eq!(pool.parameter_count(None).unwrap().total(), 12_201_310);
    }

    // Table figures count trainable parameters only; the lower end of each
    // range is the 10-class model.
    #[test]
    fn depth_family_trainable_counts() {
        for (n, lo) in [(5, 467_000), (6, 565_000), (9, 857_000), (18, 1_734_000)] {
            let t = ArchitectureConfig::resnet_depth(n).parameter_count(None).unwrap().trainable;
            assert!((lo..lo + 1000).contains(&t), "depth {}: {t}", 6 * n + 2);
        }
    }
}
