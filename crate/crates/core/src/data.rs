//! Datasets: IDX image/label files and seeded Gaussian blobs.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const CENTER_TRIES: usize = 1_000;
const LAYOUT_RESTARTS: usize = 50;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated, need {expected} bytes but file has {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error(
        "no {classes} centers with pairwise distance >= {separation} found after bounded retries"
    )]
    InfeasibleSeparation { classes: usize, separation: f64 },
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// Affine normalization `(x - mean) / std` applied at load.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: 0.0,
        std: 1.0,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    pub split: Split,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        samples: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        if samples.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: samples.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Self {
            samples,
            labels,
            class_count,
            split,
            normalization: Normalization::IDENTITY,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    /// First `count` samples as a new dataset.
    pub fn head(&self, count: usize) -> Dataset {
        let count = count.min(self.len());
        Dataset {
            samples: self.samples.slice_leading(0, count),
            labels: self.labels[..count].to_vec(),
            ..self.clone()
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    let chunk = bytes.get(at..at + 4).ok_or_else(|| DataError::Truncated {
        path: path.to_owned(),
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_owned(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(
    bytes: &'a [u8],
    header: usize,
    len: usize,
    path: &Path,
) -> Result<&'a [u8], DataError> {
    bytes
        .get(header..header + len)
        .ok_or_else(|| DataError::Truncated {
            path: path.to_owned(),
            expected: header + len,
            found: bytes.len(),
        })
}

/// Raw IDX images as `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let bytes = read_file(path)?;
    check_magic(&bytes, IDX_IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let pixels = payload(&bytes, 16, n * rows * cols, path)?.to_vec();
    Ok((n, rows, cols, pixels))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = read_file(path)?;
    check_magic(&bytes, IDX_LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    Ok(payload(&bytes, 8, n, path)?.to_vec())
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` and then
/// normalized with this dataset's own mean and standard deviation.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    load_idx_with(images, labels, None)
}

/// [`load_idx`] with an explicit normalization (e.g. the training split's).
pub fn load_idx_with(
    images: &Path,
    labels: &Path,
    normalization: Option<Normalization>,
) -> Result<Dataset, DataError> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let raw_labels = read_idx_labels(labels)?;
    if raw_labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: raw_labels.len(),
        });
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Invalid(format!(
            "empty IDX file {}",
            images.display()
        )));
    }
    let scaled: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let norm = normalization.unwrap_or_else(|| {
        let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
        let var = scaled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / scaled.len() as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Normalization { mean, std }
    });
    let data = scaled.iter().map(|x| (x - norm.mean) / norm.std).collect();
    let samples = Tensor::new(vec![n, 1, rows, cols], data).expect("sizes checked");
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut ds = Dataset::new(samples, labels, classes, Split::Train)?;
    ds.normalization = norm;
    Ok(ds)
}

fn pick_centers(
    rng: &mut ChaCha8Rng,
    classes: usize,
    dims: usize,
    separation: f64,
) -> Option<Vec<Vec<f64>>> {
    let half = separation * (classes as f64).powf(1.0 / dims as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while centers.len() < classes {
        let mut placed = false;
        for _ in 0..CENTER_TRIES {
            let c: Vec<f64> = (0..dims).map(|_| rng.random_range(-half..=half)).collect();
            let ok = centers.iter().all(|o| {
                o.iter()
                    .zip(&c)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    >= separation
            });
            if ok {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(centers)
}

/// `count` samples from unit-variance Gaussian clusters whose centers are
/// at least `separation` apart. Labels cycle through the classes.
pub fn synth_blobs(
    classes: usize,
    dims: usize,
    count: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 1 || dims < 1 || count < 1 {
        return Err(DataError::Invalid(format!(
            "classes, dims and count must be >= 1 (got {classes}, {dims}, {count})"
        )));
    }
    if !separation.is_finite() || separation <= 0.0 {
        return Err(DataError::Invalid(format!(
            "separation must be > 0, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = (0..LAYOUT_RESTARTS)
        .find_map(|_| pick_centers(&mut rng, classes, dims, separation))
        .ok_or(DataError::InfeasibleSeparation {
            classes,
            separation,
        })?;
    let mut data = Vec::with_capacity(count * dims);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes;
        for &c in &centers[label] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(c + z);
        }
        labels.push(label);
    }
    let samples = Tensor::new(vec![count, dims], data).expect("sizes match");
    Dataset::new(samples, labels, classes, Split::Train)
}

/// Train and eval splits drawn from the same blob layout.
pub fn synth_blobs_split(
    classes: usize,
    dims: usize,
    train: usize,
    eval: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    let all = synth_blobs(classes, dims, train + eval, separation, seed)?;
    let idx_train: Vec<usize> = (0..train).collect();
    let idx_eval: Vec<usize> = (train..train + eval).collect();
    let mk = |idx: &[usize], split| -> Result<Dataset, DataError> {
        let labels = idx.iter().map(|&i| all.labels[i]).collect();
        Dataset::new(all.samples.gather_leading(idx), labels, classes, split)
    };
    Ok((mk(&idx_train, Split::Train)?, mk(&idx_eval, Split::Eval)?))
}

/// Sample order for one epoch: a permutation drawn from `(seed, epoch)`
/// alone, or the identity when not shuffling.
pub fn epoch_order(len: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let x = self.dataset.samples.gather_leading(idx);
        let y = idx.iter().map(|&i| self.dataset.labels[i]).collect();
        Some((x, y))
    }
}

/// Batches for one epoch; the final partial batch is included.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    shuffle: bool,
) -> Batches<'_> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    Batches {
        dataset,
        order: epoch_order(dataset.len(), seed, epoch, shuffle),
        batch_size,
        pos: 0,
    }
}
