use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::probes::Measured;
use crate::{Error, Real, Result};

pub const PROBES_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    CosineLoss,
    L2Ratio,
    DropAccuracy,
    IntermediateAccuracy,
    GradNormRatio,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 5] = [
        ProbeKind::CosineLoss,
        ProbeKind::L2Ratio,
        ProbeKind::DropAccuracy,
        ProbeKind::IntermediateAccuracy,
        ProbeKind::GradNormRatio,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::CosineLoss => "cosine_loss",
            ProbeKind::L2Ratio => "l2_ratio",
            ProbeKind::DropAccuracy => "drop_accuracy",
            ProbeKind::IntermediateAccuracy => "intermediate_accuracy",
            ProbeKind::GradNormRatio => "grad_norm_ratio",
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown probe `{s}`")))
    }
}

/// One line of `probes.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub schema_version: u32,
    pub run_id: String,
    pub epoch: usize,
    pub split: Split,
    pub probe: ProbeKind,
    pub block: Option<usize>,
    pub stage: Option<usize>,
    pub value: Real,
    pub n_excluded: usize,
}

/// Every per-block measurement for one block, epoch and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub block_index: usize,
    pub stage_index: usize,
    pub split: Split,
    pub cosine_loss: Option<Measured>,
    pub l2_ratio: Option<Measured>,
    pub drop_accuracy: Option<Real>,
    pub intermediate_accuracy: Option<Real>,
}

impl ProbeRecord {
    pub fn to_rows(&self, run_id: &str, epoch: usize) -> Vec<ProbeRow> {
        let row = |probe, value, n_excluded| ProbeRow {
            schema_version: PROBES_SCHEMA_VERSION,
            run_id: run_id.to_owned(),
            epoch,
            split: self.split,
            probe,
            block: Some(self.block_index),
            stage: Some(self.stage_index),
            value,
            n_excluded,
        };
        let mut out = Vec::new();
        if let Some(m) = self.cosine_loss {
            out.push(row(ProbeKind::CosineLoss, m.mean, m.excluded));
        }
        if let Some(m) = self.l2_ratio {
            out.push(row(ProbeKind::L2Ratio, m.mean, m.excluded));
        }
        if let Some(a) = self.drop_accuracy {
            out.push(row(ProbeKind::DropAccuracy, a, 0));
        }
        if let Some(a) = self.intermediate_accuracy {
            out.push(row(ProbeKind::IntermediateAccuracy, a, 0));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |v: Option<Real>| v.is_none_or(|v| (0.0..=1.0).contains(&v));
        let ok = self.cosine_loss.is_none_or(|m| (-1.0..=1.0).contains(&m.mean))
            && self.l2_ratio.is_none_or(|m| m.mean >= 0.0)
            && frac(self.drop_accuracy)
            && frac(self.intermediate_accuracy);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("probe record out of range: {self:?}")))
        }
    }
}
