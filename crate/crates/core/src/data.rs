//! Datasets: CIFAR binary and IDX readers, synthetic generators, per-channel
//! standardization and seeded batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::rng::{stream, TAG_DATA, TAG_SHUFFLE, TAG_SUBSET};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// Per-channel affine standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
}

impl Normalization {
    pub fn fit(images: &Tensor) -> Self {
        let s = images.shape();
        let (n, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
        let count = (n * inner) as f64;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, &v) in images.data().iter().enumerate() {
            mean[(i / inner) % c] += v as f64;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, &v) in images.data().iter().enumerate() {
            let d = v as f64 - mean[(i / inner) % c];
            sq[(i / inner) % c] += d * d;
        }
        Normalization {
            mean: mean.iter().map(|&m| m as Real).collect(),
            std: sq
                .iter()
                .map(|&q| {
                    let sd = (q / count).sqrt();
                    if sd > 0.0 { sd as Real } else { 1.0 }
                })
                .collect(),
        }
    }

    pub fn apply(&self, images: &mut Tensor) {
        let s = images.shape().to_vec();
        let (c, inner) = (s[1], s[2..].iter().product::<usize>());
        for (i, v) in images.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// N×C×H×W.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub class_count: usize,
    /// Statistics applied to `images`, if any.
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split, class_count: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("images {s:?} with {} labels", labels.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {class_count} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            split,
            class_count,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// C, H, W of one example.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copies the selected examples into a batch tensor.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let row = self.images.row_len();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(self.images.row(i));
        }
        let [c, h, w] = self.image_shape();
        let t = Tensor::new([idx.len().max(1), c, h, w], data).unwrap_or_else(|_| Tensor::zeros([1, c, h, w]));
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (images, labels) = self.gather(idx);
        Dataset {
            images,
            labels,
            split: self.split,
            class_count: self.class_count,
            normalization: self.normalization.clone(),
        }
    }

    /// Standardizes with statistics fitted on this (training) split and returns them.
    pub fn standardize(&mut self) -> Normalization {
        let norm = Normalization::fit(&self.images);
        self.normalize_with(&norm);
        norm
    }

    pub fn normalize_with(&mut self, norm: &Normalization) {
        norm.apply(&mut self.images);
        self.normalization = Some(norm.clone());
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

/// Example indices grouped into batches; shuffled by `(seed, epoch)` when given.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: Option<(u64, usize)>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some((seed, epoch)) = shuffle {
        idx.shuffle(&mut stream(seed, &[TAG_SHUFFLE, epoch as u64]));
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Seeded class-balanced subset: `size / k` examples per class (the first
/// `size % k` classes take one more), in original order.
pub fn balanced_subset(labels: &[usize], class_count: usize, size: usize, seed: u64) -> Vec<usize> {
    if size >= labels.len() {
        return (0..labels.len()).collect();
    }
    let mut rng = stream(seed, &[TAG_SUBSET]);
    let mut chosen = Vec::with_capacity(size);
    for k in 0..class_count {
        let quota = size / class_count + usize::from(k < size % class_count);
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        members.shuffle(&mut rng);
        chosen.extend(members.into_iter().take(quota));
    }
    chosen.sort_unstable();
    chosen
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Files of the standard binary distribution for a split.
fn cifar_files(dir: &Path, classes: usize, split: Split) -> Vec<PathBuf> {
    match (classes, split) {
        (100, Split::Train) => vec![dir.join("train.bin")],
        (100, _) => vec![dir.join("test.bin")],
        (_, Split::Train) => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        (_, _) => vec![dir.join("test_batch.bin")],
    }
}

/// Parses CIFAR binary records (one label byte, two for the 100-class
/// variant where the fine label is used, then 3072 pixel bytes) into [0, 1].
pub fn parse_cifar_records(bytes: &[u8], classes: usize, base_offset: u64) -> Result<(Vec<Real>, Vec<usize>)> {
    let label_bytes = if classes == 100 { 2 } else { 1 };
    let rec = label_bytes + CIFAR_PIXELS;
    if bytes.len() % rec != 0 {
        let whole = bytes.len() / rec;
        return Err(Error::Format {
            format: "cifar",
            offset: base_offset + (whole * rec) as u64,
            detail: format!("truncated record: {} of {rec} bytes", bytes.len() % rec),
        });
    }
    let mut pixels = Vec::with_capacity(bytes.len() / rec * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    for (r, chunk) in bytes.chunks_exact(rec).enumerate() {
        let y = chunk[label_bytes - 1] as usize;
        if y >= classes {
            return Err(Error::Format {
                format: "cifar",
                offset: base_offset + (r * rec) as u64,
                detail: format!("label {y} out of range for {classes} classes"),
            });
        }
        labels.push(y);
        pixels.extend(chunk[label_bytes..].iter().map(|&b| b as Real / 255.0));
    }
    Ok((pixels, labels))
}

/// Reads a CIFAR-10 (`classes = 10`) or CIFAR-100 (`classes = 100`) split.
/// `path` is either one record file or the directory of the binary
/// distribution. Pixels are scaled to [0, 1] but not standardized.
pub fn load_cifar_binary(
    path: &Path,
    classes: usize,
    split: Split,
    subset_size: Option<usize>,
    seed: u64,
) -> Result<Dataset> {
    if classes != 10 && classes != 100 {
        return Err(Error::InvalidArgument(format!("CIFAR has 10 or 100 classes, not {classes}")));
    }
    let files = if path.is_dir() { cifar_files(path, classes, split) } else { vec![path.to_path_buf()] };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
        let (p, l) = parse_cifar_records(&bytes, classes, 0).map_err(|e| match e {
            Error::Format { offset, detail, .. } => Error::Format {
                format: "cifar",
                offset,
                detail: format!("{}: {detail}", f.display()),
            },
            e => e,
        })?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let ds = Dataset::new(Tensor::new([n, 3, 32, 32], pixels)?, labels, split, classes)?;
    Ok(match subset_size {
        Some(k) if k < n => {
            let idx = balanced_subset(&ds.labels, classes, k, seed);
            ds.subset(&idx)
        }
        _ => ds,
    })
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let fail = |offset: usize, detail: String| Error::Format {
        format: "idx",
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 4 {
        return Err(fail(0, "missing magic".into()));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic >> 8 != 0x08 || !(1..=3).contains(&(magic & 0xff)) {
        return Err(fail(0, format!("bad magic {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(fail(bytes.len(), "truncated dimensions".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() - header != n {
        return Err(fail(
            header,
            format!("dimensions {dims:?} need {n} bytes of data, found {}", bytes.len() - header),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode_idx(a: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * a.dims.len() + a.data.len());
    out.extend_from_slice(&(0x0800u32 | a.dims.len() as u32).to_be_bytes());
    for &d in &a.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&a.data);
    out
}

pub fn write_idx(path: &Path, a: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(a)).map_err(|e| Error::io(path, e))
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads an IDX image file (N×rows×cols) and its label file as a
/// single-channel dataset with pixels in [0, 1].
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let check_magic = |p: &Path, want: u32| -> Result<()> {
        let b = fs::read(p).map_err(|e| Error::io(p, e))?;
        let got = b.get(..4).map(|m| u32::from_be_bytes(m.try_into().expect("4 bytes")));
        if got != Some(want) {
            return Err(Error::Format {
                format: "idx",
                offset: 0,
                detail: format!("{}: magic {got:?}, expected {want:#010x}", p.display()),
            });
        }
        Ok(())
    };
    check_magic(images, IDX_IMAGES_MAGIC)?;
    check_magic(labels, IDX_LABELS_MAGIC)?;
    let im = read_idx(images)?;
    let lb = read_idx(labels)?;
    if lb.dims[0] != im.dims[0] {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} images",
            lb.dims[0], im.dims[0]
        )));
    }
    let labels: Vec<usize> = lb.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let pixels = im.data.iter().map(|&b| b as Real / 255.0).collect();
    Dataset::new(Tensor::new([im.dims[0], 1, im.dims[1], im.dims[2]], pixels)?, labels, split, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Class means along random directions; unit Gaussian noise per value.
    Blobs,
    /// Oriented sinusoidal gratings with a random phase per example plus unit
    /// Gaussian noise. Only local texture identifies the class, so the task
    /// needs convolutional features rather than a linear read-out.
    Gratings,
}

/// Parameters of a synthetic classification task. The class structure depends
/// on `seed` alone; each split draws its own examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_per_class: usize,
    pub class_count: usize,
    pub image_shape: [usize; 3],
    /// Distance of class means from the origin (blobs) or grating amplitude,
    /// in units of the noise standard deviation.
    pub separation: Real,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn generate(&self, split: Split) -> Result<Dataset> {
        if !(self.separation >= 0.0) || self.class_count == 0 || self.n_per_class == 0 {
            return Err(Error::InvalidArgument(format!(
                "synthetic task with separation {}, {} classes, {} per class",
                self.separation, self.class_count, self.n_per_class
            )));
        }
        let [c, h, w] = self.image_shape;
        let d = c * h * w;
        let k = self.class_count;
        let n = k * self.n_per_class;
        let mut noise = stream(self.seed, &[TAG_DATA, 1, split.tag()]);
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        match self.kind {
            SyntheticKind::Blobs => {
                let mut rng = stream(self.seed, &[TAG_DATA, 0]);
                let means: Vec<Vec<Real>> = (0..k)
                    .map(|_| {
                        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                        v.iter().map(|x| (x / norm * self.separation as f64) as Real).collect()
                    })
                    .collect();
                for i in 0..n {
                    let y = i % k;
                    labels.push(y);
                    data.extend(means[y].iter().map(|&m| m + noise.sample::<f64, _>(StandardNormal) as Real));
                }
            }
            SyntheticKind::Gratings => {
                let freq = 2.0 * std::f64::consts::PI / 4.0;
                for i in 0..n {
                    let y = i % k;
                    labels.push(y);
                    let theta = std::f64::consts::PI * y as f64 / k as f64;
                    let (kx, ky) = (freq * theta.cos(), freq * theta.sin());
                    let phase = noise.random::<f64>() * 2.0 * std::f64::consts::PI;
                    for _ in 0..c {
                        for r in 0..h {
                            for col in 0..w {
                                let g = (kx * col as f64 + ky * r as f64 + phase).cos();
                                let e: f64 = noise.sample(StandardNormal);
                                data.push((self.separation as f64 * g + e) as Real);
                            }
                        }
                    }
                }
            }
        }
        Dataset::new(Tensor::new([n, c, h, w], data)?, labels, split, k)
    }
}

/// Class-conditional Gaussian blobs embedded as flat images (training split).
pub fn synthetic_clusters(
    n_per_class: usize,
    class_count: usize,
    image_shape: [usize; 3],
    separation: Real,
    seed: u64,
) -> Result<Dataset> {
    if !(separation >= 0.0) {
        return Err(Error::InvalidArgument(format!("separation must be nonnegative, got {separation}")));
    }
    SyntheticSpec {
        kind: SyntheticKind::Blobs,
        n_per_class,
        class_count,
        image_shape,
        separation,
        seed,
    }
    .generate(Split::Train)
}
