use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar_binary, load_idx, balanced_subset, Dataset, Split, SyntheticSpec};
use crate::nn::ArchitectureConfig;
use crate::probes::ProbeKind;
use crate::share_unroll::{SharingSpec, UnrollSpec};
use crate::train::TrainConfig;
use crate::{Error, Real, Result};

/// One experiment, read from TOML. Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    /// Root under which `run_id` becomes a directory; see [`super::resolve_output_root`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub architecture: ArchitectureConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharing: Option<SharingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unroll: Option<UnrollSpec>,
    #[serde(default)]
    pub probes: ProbeSettings,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    #[serde(default)]
    pub enabled: Vec<ProbeKind>,
    /// Probe after every `every` epochs (and after the last one).
    #[serde(default = "default_every")]
    pub every: usize,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Leading examples of the split to probe; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_samples: Option<usize>,
    /// Borderline half-width in probability units.
    #[serde(default = "default_tau")]
    pub tau: Real,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_every() -> usize {
    1
}

fn default_split() -> Split {
    Split::Train
}

fn default_tau() -> Real {
    0.1
}

fn default_batch() -> usize {
    100
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            enabled: Vec::new(),
            every: default_every(),
            split: default_split(),
            max_samples: None,
            tau: default_tau(),
            batch_size: default_batch(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Cifar100,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

/// Where examples come from. Validation examples are a class-balanced subset
/// of the test split for file-backed sources and a separate draw for
/// synthetic tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR directory or record file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
    /// Seed for subset selection.
    #[serde(default)]
    pub seed: u64,
}

/// All three splits, standardized with training statistics.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn cut(ds: Dataset, size: Option<usize>, seed: u64, salt: u64) -> Dataset {
    match size {
        Some(k) if k < ds.len() => {
            let idx = balanced_subset(&ds.labels, ds.class_count, k, seed.wrapping_add(salt));
            ds.subset(&idx)
        }
        _ => ds,
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let missing = |what: &str| Err(Error::Config(format!("data source {:?} needs `{what}`", self.source)));
        match self.source {
            DataSource::Synthetic if self.synthetic.is_none() => missing("synthetic"),
            DataSource::Cifar10 | DataSource::Cifar100 if self.path.is_none() => missing("path"),
            DataSource::Idx if self.idx.is_none() => missing("idx"),
            _ => Ok(()),
        }?;
        if [self.train_subset, self.val_subset, self.test_subset].contains(&Some(0)) {
            return Err(Error::Config("subset sizes must be positive".into()));
        }
        Ok(())
    }

    /// Loads and standardizes every split.
    pub fn load(&self) -> Result<Splits> {
        self.validate()?;
        let (train, val, test) = match self.source {
            DataSource::Synthetic => {
                let spec = self.synthetic.as_ref().expect("validated");
                (
                    spec.generate(Split::Train)?,
                    spec.generate(Split::Val)?,
                    spec.generate(Split::Test)?,
                )
            }
            DataSource::Cifar10 | DataSource::Cifar100 => {
                let classes = if self.source == DataSource::Cifar10 { 10 } else { 100 };
                let path = self.path.as_ref().expect("validated");
                let train = load_cifar_binary(path, classes, Split::Train, None, self.seed)?;
                let mut test = load_cifar_binary(path, classes, Split::Test, None, self.seed)?;
                let mut val = test.clone();
                val.split = Split::Val;
                test.split = Split::Test;
                (train, val, test)
            }
            DataSource::Idx => {
                let p = self.idx.as_ref().expect("validated");
                let train = load_idx(&p.train_images, &p.train_labels, Split::Train)?;
                let test = load_idx(&p.test_images, &p.test_labels, Split::Test)?;
                let mut val = test.clone();
                val.split = Split::Val;
                (train, val, test)
            }
        };
        let mut train = cut(train, self.train_subset, self.seed, 0);
        let mut val = cut(val, self.val_subset, self.seed, 1);
        let mut test = cut(test, self.test_subset, self.seed, 2);
        let norm = train.standardize();
        val.normalize_with(&norm);
        test.normalize_with(&norm);
        Ok(Splits { train, val, test })
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || self.run_id.starts_with('.')
        {
            return Err(Error::Config(format!(
                "run_id `{}` must be nonempty and use only letters, digits, '-', '_' and '.'",
                self.run_id
            )));
        }
        self.architecture.validate()?;
        self.train.validate()?;
        if let Some(s) = &self.sharing {
            s.validate_for(&self.architecture)?;
        }
        if let Some(u) = &self.unroll {
            if !(u.alpha.is_finite() && u.alpha > 0.0) {
                return Err(Error::Config(format!("unroll.alpha {} must be positive", u.alpha)));
            }
        }
        let p = &self.probes;
        if p.every == 0 || p.batch_size == 0 || p.max_samples == Some(0) {
            return Err(Error::Config("probes.every, probes.batch_size and probes.max_samples must be positive".into()));
        }
        if !(p.tau > 0.0 && p.tau <= 0.5) {
            return Err(Error::Config(format!("probes.tau {} outside (0, 0.5]", p.tau)));
        }
        self.data.validate()?;
        if let Some(s) = &self.data.synthetic {
            if self.data.source == DataSource::Synthetic {
                if s.image_shape != self.architecture.input_shape {
                    return Err(Error::Config(format!(
                        "synthetic image_shape {:?} differs from architecture.input_shape {:?}",
                        s.image_shape, self.architecture.input_shape
                    )));
                }
                if s.class_count != self.architecture.num_classes {
                    return Err(Error::Config(format!(
                        "synthetic class_count {} differs from architecture.num_classes {}",
                        s.class_count, self.architecture.num_classes
                    )));
                }
            }
        }
        Ok(())
    }
}
