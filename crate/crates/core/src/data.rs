//! Image datasets: in-memory representation, on-disk format, synthetic
//! generation, label corruption, converters for raw CIFAR/MNIST dumps, and
//! normalized batch assembly.
//!
//! On disk a dataset is a directory holding `meta.json`, `images.bin`
//! (row-major `N x C x H x W` bytes) and `labels.bin` (little-endian `u16`).

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `[C, H, W]` of one sample.
    pub shape: [usize; 3],
    /// Per-channel mean and standard deviation on the 0..255 scale.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    version: u32,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "N")]
    n: usize,
    shape: [usize; 3],
    mean: Vec<f64>,
    std: Vec<f64>,
    split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<usize>,
        num_classes: usize,
        shape: [usize; 3],
        split: Split,
    ) -> Result<Self> {
        let mut d = Self {
            images,
            labels,
            num_classes,
            shape,
            mean: vec![0.0; shape[0]],
            std: vec![1.0; shape[0]],
            split,
        };
        let (mean, std) = d.channel_stats();
        d.mean = mean;
        d.std = std;
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let s = self.sample_len();
        &self.images[i * s..(i + 1) * s]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > u16::MAX as usize + 1 {
            return Err(Error::data(format!(
                "{} classes is not supported",
                self.num_classes
            )));
        }
        if self.shape.contains(&0) {
            return Err(Error::data(format!(
                "sample shape {:?} has a zero extent",
                self.shape
            )));
        }
        if self.images.len() != self.len() * self.sample_len() {
            return Err(Error::data(format!(
                "{} image bytes for {} samples of shape {:?}",
                self.images.len(),
                self.len(),
                self.shape
            )));
        }
        if self.mean.len() != self.shape[0] || self.std.len() != self.shape[0] {
            return Err(Error::data(
                "normalization statistics do not match the channel count",
            ));
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::data(format!(
                "normalization std {:?} must be positive",
                self.std
            )));
        }
        if let Some((i, &y)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &y)| y >= self.num_classes)
        {
            return Err(Error::data(format!(
                "sample {i} has label {y}, outside [0, {})",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Per-channel mean and standard deviation of the stored bytes.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let [c, h, w] = self.shape;
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in self.images.chunks_exact(c * hw) {
            for ch in 0..c {
                for &b in &img[ch * hw..(ch + 1) * hw] {
                    let v = b as f64;
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (self.len() * hw).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1e-3)
            })
            .collect();
        (mean, std)
    }

    /// Uses another dataset's normalization (typically train stats on test).
    pub fn with_stats_of(mut self, other: &Dataset) -> Result<Self> {
        if other.shape[0] != self.shape[0] {
            return Err(Error::data("datasets have different channel counts"));
        }
        self.mean = other.mean.clone();
        self.std = other.std.clone();
        Ok(self)
    }

    /// Class counts, index = label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Normalized `B x C x H x W` batch of the given samples with their
    /// labels. With `augment`, each image is randomly shifted within a
    /// 4-pixel zero-padded border and flipped horizontally with p = 0.5.
    pub fn batch<T: Scalar>(
        &self,
        indices: &[usize],
        augment: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let [c, h, w] = self.shape;
        let s = self.sample_len();
        let mut out = Vec::with_capacity(indices.len() * s);
        let mut labels = Vec::with_capacity(indices.len());
        let mut aug = augment;
        for &i in indices {
            if i >= self.len() {
                return Err(Error::data(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            let img = self.image(i);
            let (dy, dx, flip) = match aug.as_deref_mut() {
                Some(rng) => (
                    rng.random_range(0..=8) as isize - 4,
                    rng.random_range(0..=8) as isize - 4,
                    rng.random_bool(0.5),
                ),
                None => (0, 0, false),
            };
            for ch in 0..c {
                let (m, sd) = (self.mean[ch], self.std[ch]);
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize + dy;
                        let xx = if flip { w - 1 - x } else { x };
                        let sx = xx as isize + dx;
                        let raw = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            img[ch * h * w + sy as usize * w + sx as usize] as f64
                        } else {
                            0.0
                        };
                        out.push(T::of((raw - m) / sd));
                    }
                }
            }
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), c, h, w], out)?, labels))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = Meta {
            version: DATASET_FORMAT_VERSION,
            k: self.num_classes,
            n: self.len(),
            shape: self.shape,
            mean: self.mean.clone(),
            std: self.std.clone(),
            split: self.split,
        };
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        let p = dir.join("meta.json");
        fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
        let p = dir.join("images.bin");
        fs::write(&p, &self.images).map_err(|e| Error::io(&p, e))?;
        let labels: Vec<u8> = self
            .labels
            .iter()
            .flat_map(|&y| (y as u16).to_le_bytes())
            .collect();
        let p = dir.join("labels.bin");
        fs::write(&p, labels).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("meta.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: Meta =
            serde_json::from_str(&text).map_err(|e| Error::corrupt(&p, e.to_string()))?;
        if meta.version != DATASET_FORMAT_VERSION {
            return Err(Error::corrupt(
                &p,
                format!("unsupported dataset version {}", meta.version),
            ));
        }
        let p = dir.join("images.bin");
        let images = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let expect = meta.n * meta.shape.iter().product::<usize>();
        if images.len() != expect {
            return Err(Error::corrupt(
                &p,
                format!("{} bytes, expected {expect}", images.len()),
            ));
        }
        let p = dir.join("labels.bin");
        let raw = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if raw.len() != 2 * meta.n {
            return Err(Error::corrupt(
                &p,
                format!("{} bytes, expected {}", raw.len(), 2 * meta.n),
            ));
        }
        let labels = raw
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
            .collect();
        let d = Self {
            images,
            labels,
            num_classes: meta.k,
            shape: meta.shape,
            mean: meta.mean,
            std: meta.std,
            split: meta.split,
        };
        d.validate()
            .map_err(|e| Error::corrupt(dir, e.to_string()))?;
        Ok(d)
    }
}

/// Parameters of the synthetic template dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Training samples per class.
    pub per_class: usize,
    /// Test samples per class.
    pub test_per_class: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Template amplitude, in pixel units.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Per-pixel Gaussian noise std, in pixel units.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_channels() -> usize {
    3
}
fn default_amplitude() -> f64 {
    40.0
}
fn default_noise() -> f64 {
    40.0
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, image_size: usize) -> Self {
        Self {
            classes,
            per_class,
            test_per_class: (per_class / 4).max(1),
            image_size,
            channels: default_channels(),
            amplitude: default_amplitude(),
            noise: default_noise(),
        }
    }
}

/// Smooth zero-mean, unit-RMS spatial templates, one per class.
pub fn class_templates(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, s) = (spec.channels, spec.image_size);
    (0..spec.classes)
        .map(|_| {
            // A sum of random low-frequency plane waves per channel.
            let mut t = vec![0.0; c * s * s];
            for ch in 0..c {
                for _ in 0..3 {
                    let fy: f64 = rng.random_range(0.5..2.5);
                    let fx: f64 = rng.random_range(0.5..2.5);
                    let ph: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let a: f64 = StandardNormal.sample(&mut rng);
                    for y in 0..s {
                        for x in 0..s {
                            let u =
                                std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / s as f64;
                            t[ch * s * s + y * s + x] += a * (u + ph).sin();
                        }
                    }
                }
            }
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            let rms = (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64).sqrt();
            t.iter().map(|v| (v - mean) / rms.max(1e-12)).collect()
        })
        .collect()
}

fn render(template: &[f64], spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let gain: f64 = rng.random_range(0.8..1.2);
    let noise: Vec<f64> = (0..template.len())
        .map(|_| StandardNormal.sample(&mut *rng))
        .collect();
    let (amp, sd) = (spec.amplitude, spec.noise);
    template
        .iter()
        .zip(noise)
        .map(|(t, n)| (128.0 + amp * gain * t + sd * n).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Balanced train and test splits drawn around per-class templates. The
/// test split carries the training normalization statistics.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 {
        return Err(Error::config("synthetic data needs at least two classes"));
    }
    if spec.per_class == 0 || spec.test_per_class == 0 || spec.image_size == 0 || spec.channels == 0
    {
        return Err(Error::config("synthetic data sizes must be positive"));
    }
    if !(spec.amplitude >= 0.0 && spec.noise >= 0.0) {
        return Err(Error::config(
            "synthetic amplitude and noise must be non-negative",
        ));
    }
    let templates = class_templates(spec, seed);
    let shape = [spec.channels, spec.image_size, spec.image_size];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut make = |per: usize, split: Split| -> Result<Dataset> {
        let mut images = Vec::with_capacity(per * spec.classes * shape.iter().product::<usize>());
        let mut labels = Vec::with_capacity(per * spec.classes);
        // Interleave classes so prefixes of the dataset stay balanced.
        for _ in 0..per {
            for (k, t) in templates.iter().enumerate() {
                images.extend(render(t, spec, &mut rng));
                labels.push(k);
            }
        }
        Dataset::new(images, labels, spec.classes, shape, split)
    };
    let train = make(spec.per_class, Split::Train)?;
    let test = make(spec.test_per_class, Split::Test)?.with_stats_of(&train)?;
    Ok((train, test))
}

/// Replaces exactly `round(ratio * N)` distinct labels with a label drawn
/// uniformly from the other `K - 1` classes. Returns the new dataset and
/// the sorted indices that changed.
pub fn corrupt_labels(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!(
            "noise ratio {ratio} must lie in [0, 1]"
        )));
    }
    let n = data.len();
    let count = (ratio * n as f64).round() as usize;
    if count > 0 && data.num_classes < 2 {
        return Err(Error::config("label corruption needs at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, count).into_vec();
    idx.sort_unstable();
    let mut out = data.clone();
    for &i in &idx {
        let orig = out.labels[i];
        let r = rng.random_range(0..data.num_classes - 1);
        out.labels[i] = if r >= orig { r + 1 } else { r };
    }
    Ok((out, idx))
}

/// Layout of a raw CIFAR binary record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    /// 1 label byte + 3072 pixel bytes.
    Cifar10,
    /// Coarse and fine label bytes + 3072 pixel bytes; the fine label is used.
    Cifar100,
}

/// Parses concatenated raw CIFAR binary batches.
pub fn convert_cifar(raw: &[u8], variant: CifarVariant, split: Split) -> Result<Dataset> {
    let (head, k) = match variant {
        CifarVariant::Cifar10 => (1, 10),
        CifarVariant::Cifar100 => (2, 100),
    };
    let rec = head + 3072;
    if raw.is_empty() || !raw.len().is_multiple_of(rec) {
        return Err(Error::data(format!(
            "{} bytes is not a whole number of {rec}-byte CIFAR records",
            raw.len()
        )));
    }
    let n = raw.len() / rec;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for r in raw.chunks_exact(rec) {
        labels.push(r[head - 1] as usize);
        images.extend_from_slice(&r[head..]);
    }
    Dataset::new(images, labels, k, [3, 32, 32], split)
}

fn idx_header(raw: &[u8], magic: u32, dims: usize, what: &str) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if raw.len() < need || u32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]) != magic {
        return Err(Error::data(format!(
            "{what} is not an idx file with magic {magic:#010x}"
        )));
    }
    Ok((0..dims)
        .map(|d| {
            let o = 4 + 4 * d;
            u32::from_be_bytes([raw[o], raw[o + 1], raw[o + 2], raw[o + 3]]) as usize
        })
        .collect())
}

/// Parses an MNIST idx image file and its matching label file.
pub fn convert_mnist(images_raw: &[u8], labels_raw: &[u8], split: Split) -> Result<Dataset> {
    let d = idx_header(images_raw, 0x0000_0803, 3, "image file")?;
    let l = idx_header(labels_raw, 0x0000_0801, 1, "label file")?;
    let (n, h, w) = (d[0], d[1], d[2]);
    if l[0] != n {
        return Err(Error::data(format!("{n} images but {} labels", l[0])));
    }
    let body = &images_raw[16..];
    if body.len() != n * h * w || labels_raw.len() != 8 + n {
        return Err(Error::data("idx payload length does not match its header"));
    }
    let labels = labels_raw[8..].iter().map(|&b| b as usize).collect();
    Dataset::new(body.to_vec(), labels, 10, [1, h, w], split)
}
