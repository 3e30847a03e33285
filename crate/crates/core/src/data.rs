//! Labeled image sets: the CIFAR-10 binary format and a seeded synthetic
//! generator (class templates plus Gaussian noise).

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::InvalidData(format!(
                "{} labels for images shaped {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledSet> {
        if indices.is_empty() {
            return Err(Error::InvalidData("empty subset".into()));
        }
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledSet::new(images, labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub classes: usize,
}

/// Parses concatenated CIFAR-10 binary records, scaling pixels to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledSet> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::CorruptData(format!(
            "CIFAR-10 payload of {} bytes is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::CorruptData(format!("record {i} has label {label}")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    LabeledSet::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels)
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<LabeledSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes).map_err(|e| match e {
        Error::CorruptData(msg) => Error::CorruptData(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn load_cifar10_files<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledSet> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let set = load_cifar10(p)?;
        labels.extend(set.labels);
        images.extend(set.images.into_data());
    }
    if labels.is_empty() {
        return Err(Error::InvalidData("no CIFAR-10 files given".into()));
    }
    LabeledSet::new(Tensor::new(vec![labels.len(), 3, 32, 32], images)?, labels)
}

/// Serializes a set back into CIFAR-10 records; pixels are rounded from `[0, 1]`.
pub fn encode_cifar10(set: &LabeledSet) -> Result<Vec<u8>> {
    if set.images.shape()[1..] != [3, 32, 32] {
        return Err(Error::InvalidShape("CIFAR-10 images are 3x32x32".into()));
    }
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for (i, &label) in set.labels.iter().enumerate() {
        out.push(u8::try_from(label).map_err(|_| Error::InvalidData(format!("label {label}")))?);
        let px = &set.images.data()[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS];
        out.extend(px.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn from_set(set: &LabeledSet) -> Self {
        let [n, c, h, w] = [
            set.images.shape()[0],
            set.images.shape()[1],
            set.images.shape()[2],
            set.images.shape()[3],
        ];
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, v) in set.images.data().iter().enumerate() {
            let ch = (i / plane) % c;
            mean[ch] += v;
            sq[ch] += v * v;
        }
        let mean: Vec<f64> = mean.iter().map(|m| m / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, set: &mut LabeledSet) -> Result<()> {
        let c = set.images.shape()[1];
        if self.mean.len() != c || self.std.len() != c {
            return Err(Error::InvalidData(format!(
                "normalization has {} channels, images have {c}",
                self.mean.len()
            )));
        }
        let plane = set.images.shape()[2] * set.images.shape()[3];
        for (i, v) in set.images.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 100,
            test_per_class: 50,
            channels: 3,
            height: 16,
            width: 16,
            noise: 1.5,
            seed: 0,
        }
    }
}

/// Normalizes both splits with the per-channel statistics of the training split.
pub fn normalize_dataset(data: &mut Dataset) -> Result<Normalization> {
    let norm = Normalization::from_set(&data.train);
    norm.apply(&mut data.train)?;
    norm.apply(&mut data.test)?;
    Ok(norm)
}

/// Each class gets a fixed N(0, 1) template; samples add N(0, noise^2) per pixel.
pub fn generate_synthetic(params: &SyntheticParams) -> Result<Dataset> {
    if params.classes < 2 {
        return Err(Error::InvalidArgument("synthetic data needs at least 2 classes".into()));
    }
    if params.train_per_class == 0 || params.test_per_class == 0 {
        return Err(Error::InvalidArgument("synthetic split sizes must be positive".into()));
    }
    if params.noise < 0.0 || !params.noise.is_finite() {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {}", params.noise)));
    }
    let dim = params.channels * params.height * params.width;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let templates: Vec<Vec<f64>> = (0..params.classes)
        .map(|_| (0..dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();

    let mut split = |per_class: usize| -> Result<LabeledSet> {
        let n = per_class * params.classes;
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        // interleave classes so consecutive samples differ
        for _ in 0..per_class {
            for (class, tpl) in templates.iter().enumerate() {
                labels.push(class);
                data.extend(tpl.iter().map(|t| t + params.noise * unit.sample(&mut rng)));
            }
        }
        LabeledSet::new(
            Tensor::new(vec![n, params.channels, params.height, params.width], data)?,
            labels,
        )
    };
    let train = split(params.train_per_class)?;
    let test = split(params.test_per_class)?;
    Ok(Dataset {
        train,
        test,
        classes: params.classes,
    })
}

/// Seeded subset of `size` training images (all of them if fewer).
pub fn calibration_batch(set: &LabeledSet, size: usize, seed: u64) -> Result<Tensor> {
    if set.is_empty() {
        return Err(Error::InvalidData("empty training set".into()));
    }
    let size = size.clamp(1, set.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, set.len(), size).into_vec();
    picks.sort_unstable();
    set.images.select_rows(&picks)
}
