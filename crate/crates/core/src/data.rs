//! Datasets: a seeded synthetic image generator and the CIFAR-10 binary
//! format.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SearchRng;

/// Images in NCHW order with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub resolution: usize,
    pub num_classes: usize,
}

/// A mini-batch ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        channels: usize,
        resolution: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let per = channels * resolution * resolution;
        if images.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} pixel values for {} images of {per} values",
                images.len(),
                labels.len()
            )));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Data(format!("label {l} of image {i} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            resolution,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Batch {
            images: Tensor::new(
                vec![indices.len(), self.channels, self.resolution, self.resolution],
                data,
            )
            .expect("consistent batch"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive batches in storage order; the last may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// Batches of a random permutation. A trailing batch smaller than 2 is
    /// dropped because batch statistics need at least two samples.
    pub fn shuffled_batches<R: RngCore + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Batch> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(2))
            .filter(|c| c.len() >= 2)
            .map(|c| self.batch(c))
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            images: b.images.into_data(),
            labels: b.labels,
            channels: self.channels,
            resolution: self.resolution,
            num_classes: self.num_classes,
        }
    }

    /// Random split into `(first, rest)` with `round(fraction * n)` images in
    /// the first part. `fraction = 0.5` gives the train/validation halves.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("split fraction {fraction} outside [0, 1]")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut SearchRng::seed_from_u64(seed));
        let cut = (fraction * self.len() as f64).round() as usize;
        let (a, b) = idx.split_at(cut);
        Ok((self.select(a), self.select(b)))
    }

    /// Keeps only `classes`, relabelled to their position in the list.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<Dataset> {
        if let Some(&c) = classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::Data(format!("class {c} outside [0, {})", self.num_classes)));
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let mut d = self.select(&keep);
        for l in &mut d.labels {
            *l = classes.iter().position(|c| c == l).expect("filtered");
        }
        d.num_classes = classes.len();
        Ok(d)
    }

    pub fn to_archive(&self, kind: &str, meta: serde_json::Value) -> Archive {
        let mut a = Archive::new(kind, meta);
        self.push_into(&mut a, "");
        a
    }

    /// Appends `{prefix}images` and `{prefix}labels` arrays.
    pub fn push_into(&self, a: &mut Archive, prefix: &str) {
        let t = Tensor::new(
            vec![self.len(), self.channels, self.resolution, self.resolution],
            self.images.clone(),
        )
        .expect("consistent dataset");
        a.push_tensor(format!("{prefix}images"), &t);
        a.push_u32(format!("{prefix}labels"), self.labels.iter().map(|&l| l as u32).collect());
    }

    pub fn from_archive(a: &Archive, prefix: &str, num_classes: usize) -> Result<Dataset> {
        let t = a.tensor(&format!("{prefix}images"))?;
        let (_, c, h, w) = t.dims4("dataset archive")?;
        if h != w {
            return Err(Error::Data(format!("non-square images {h}x{w}")));
        }
        let labels = a.u32s(&format!("{prefix}labels"))?.iter().map(|&l| l as usize).collect();
        Dataset::new(t.into_data(), labels, c, h, num_classes)
    }
}

/// Parameters of the synthetic classification task.
///
/// Each class has a smooth random prototype derived from
/// `prototype_seed` and the class index only, so datasets with more classes
/// extend datasets with fewer. Samples are randomly shifted prototypes plus
/// Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub samples: usize,
    pub resolution: usize,
    pub channels: usize,
    pub noise: f64,
    /// Maximum absolute shift in pixels (wrapping).
    pub max_shift: usize,
    pub seed: u64,
    pub prototype_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 4,
            samples: 1024,
            resolution: 8,
            channels: 3,
            noise: 1.0,
            max_shift: 1,
            seed: 0,
            prototype_seed: 7,
        }
    }
}

fn prototype(cfg: &SyntheticConfig, class: usize) -> Vec<f32> {
    let mut rng = SearchRng::seed_from_u64(cfg.prototype_seed);
    rng.set_stream(class as u64 + 1);
    let r = cfg.resolution;
    let raw: Vec<f64> = (0..cfg.channels * r * r).map(|_| StandardNormal.sample(&mut rng)).collect();
    // 3x3 wrap-around box blur for spatial structure.
    let mut out = vec![0.0f32; raw.len()];
    for c in 0..cfg.channels {
        for y in 0..r {
            for x in 0..r {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let yy = (y + r + dy - 1) % r;
                        let xx = (x + r + dx - 1) % r;
                        acc += raw[(c * r + yy) * r + xx];
                    }
                }
                out[(c * r + y) * r + x] = (acc / 3.0) as f32;
            }
        }
    }
    out
}

/// Generates a class-balanced synthetic dataset.
pub fn synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.num_classes < 2 || cfg.resolution == 0 || cfg.channels == 0 {
        return Err(Error::Config(format!(
            "synthetic dataset needs >= 2 classes and positive size, got {cfg:?}"
        )));
    }
    let protos: Vec<Vec<f32>> = (0..cfg.num_classes).map(|c| prototype(cfg, c)).collect();
    let mut rng = SearchRng::seed_from_u64(cfg.seed);
    let mut labels: Vec<usize> = (0..cfg.samples).map(|i| i % cfg.num_classes).collect();
    labels.shuffle(&mut rng);
    let r = cfg.resolution;
    let per = cfg.channels * r * r;
    let shift = cfg.max_shift as i64;
    let mut images = Vec::with_capacity(cfg.samples * per);
    for &l in &labels {
        let sy = rng.gen_range(-shift..=shift);
        let sx = rng.gen_range(-shift..=shift);
        let p = &protos[l];
        for c in 0..cfg.channels {
            for y in 0..r {
                for x in 0..r {
                    let yy = (y as i64 + sy).rem_euclid(r as i64) as usize;
                    let xx = (x as i64 + sx).rem_euclid(r as i64) as usize;
                    let n: f64 = StandardNormal.sample(&mut rng);
                    images.push(p[(c * r + yy) * r + xx] + (cfg.noise * n) as f32);
                }
            }
        }
    }
    Dataset::new(images, labels, cfg.channels, r, cfg.num_classes)
}

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RESOLUTION: usize = 32;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_RESOLUTION * CIFAR_RESOLUTION;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Decoded CIFAR-10 records: raw pixel bytes and labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawImages {
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

/// Parses one binary batch file (records of 1 label byte + 3072 pixel
/// bytes). `expected_records` checks the exact file length.
pub fn parse_cifar_batch(bytes: &[u8], name: &str, expected_records: Option<usize>) -> Result<RawImages> {
    if let Some(n) = expected_records {
        let expected = n * CIFAR_RECORD_BYTES;
        if bytes.len() != expected {
            return Err(Error::Data(format!(
                "{name}: expected {expected} bytes ({n} records of {CIFAR_RECORD_BYTES}), found {}",
                bytes.len()
            )));
        }
    }
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        return Err(Error::Data(format!(
            "{name}: malformed record at byte offset {whole}: {} bytes where a record needs {CIFAR_RECORD_BYTES}",
            bytes.len() - whole
        )));
    }
    let mut out = RawImages::default();
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Data(format!(
                "{name}: label {label} outside [0, 10) at byte offset {}",
                i * CIFAR_RECORD_BYTES
            )));
        }
        out.labels.push(label);
        out.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(out)
}

/// Reads the five training batches and the test batch from `dir`.
pub fn read_cifar10(dir: &Path) -> Result<(RawImages, RawImages)> {
    let read = |name: &str| -> Result<RawImages> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        parse_cifar_batch(&bytes, name, Some(CIFAR_RECORDS_PER_FILE))
    };
    let mut train = RawImages::default();
    for f in CIFAR_TRAIN_FILES {
        let b = read(f)?;
        train.pixels.extend(b.pixels);
        train.labels.extend(b.labels);
    }
    Ok((train, read(CIFAR_TEST_FILE)?))
}

/// Per-channel normalization statistics (in `[0,1]` pixel units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn channel_stats(raw: &RawImages, channels: usize) -> ChannelStats {
    let plane = raw.pixels.len() / raw.labels.len().max(1) / channels;
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    for img in raw.pixels.chunks(channels * plane) {
        for c in 0..channels {
            for &p in &img[c * plane..(c + 1) * plane] {
                let v = p as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let n = (raw.labels.len() * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n - m * m).max(1e-12).sqrt())
        .collect();
    ChannelStats { mean, std }
}

/// Normalizes raw images and average-pools them by `downsample`.
pub fn normalize(raw: &RawImages, stats: &ChannelStats, resolution: usize, downsample: usize) -> Result<Dataset> {
    let channels = stats.mean.len();
    if downsample == 0 || resolution % downsample != 0 {
        return Err(Error::Config(format!(
            "downsample factor {downsample} must divide resolution {resolution}"
        )));
    }
    let out_res = resolution / downsample;
    let plane = resolution * resolution;
    let area = (downsample * downsample) as f64;
    let mut images = Vec::with_capacity(raw.labels.len() * channels * out_res * out_res);
    for img in raw.pixels.chunks(channels * plane) {
        for c in 0..channels {
            for y in 0..out_res {
                for x in 0..out_res {
                    let mut acc = 0.0;
                    for dy in 0..downsample {
                        for dx in 0..downsample {
                            acc += img[c * plane + (y * downsample + dy) * resolution + x * downsample + dx] as f64;
                        }
                    }
                    let v = acc / area / 255.0;
                    images.push(((v - stats.mean[c]) / stats.std[c]) as f32);
                }
            }
        }
    }
    Dataset::new(images, raw.labels.clone(), channels, out_res, CIFAR_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_reproducible_and_balanced() {
        let cfg = SyntheticConfig {
            num_classes: 4,
            samples: 1024,
            ..SyntheticConfig::default()
        };
        let a = synthetic(&cfg).unwrap();
        assert_eq!(a, synthetic(&cfg).unwrap());
        assert_eq!(a.len(), 1024);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 256);
        }
    }

    #[test]
    fn prototypes_shared_across_class_counts() {
        let five = SyntheticConfig {
            num_classes: 5,
            ..SyntheticConfig::default()
        };
        let ten = SyntheticConfig {
            num_classes: 10,
            ..five.clone()
        };
        for c in 0..5 {
            assert_eq!(prototype(&five, c), prototype(&ten, c));
        }
    }

    #[test]
    fn cifar_record_validation() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        bytes[CIFAR_RECORD_BYTES] = 3;
        let r = parse_cifar_batch(&bytes, "b", Some(2)).unwrap();
        assert_eq!(r.labels, vec![0, 3]);
        assert_eq!(r.pixels.len(), 2 * 3072);

        let err = parse_cifar_batch(&bytes[..100], "b", Some(2)).unwrap_err().to_string();
        assert!(err.contains("expected 6146 bytes") && err.contains("found 100"), "{err}");

        bytes[CIFAR_RECORD_BYTES] = 10;
        let err = parse_cifar_batch(&bytes, "b", None).unwrap_err().to_string();
        assert!(err.contains("byte offset 3073"), "{err}");
    }

    #[test]
    fn split_halves_and_filter() {
        let d = synthetic(&SyntheticConfig::default()).unwrap();
        let (a, b) = d.split(0.5, 3).unwrap();
        assert_eq!(a.len() + b.len(), d.len());
        assert_eq!(a.len(), 512);
        let f = d.filter_classes(&[2, 0]).unwrap();
        assert_eq!(f.num_classes, 2);
        assert_eq!(f.len(), 512);
    }

    #[test]
    fn normalization_downsamples() {
        let raw = RawImages {
            pixels: (0..2 * 3 * 16).map(|i| (i * 5) as u8).collect(),
            labels: vec![1, 2],
        };
        let stats = channel_stats(&raw, 3);
        let d = normalize(&raw, &stats, 4, 2).unwrap();
        assert_eq!(d.resolution, 2);
        assert_eq!(d.images.len(), 2 * 3 * 4);
        let mean: f32 = d.images.iter().sum::<f32>() / d.images.len() as f32;
        assert!(mean.abs() < 1e-5);
    }
}
