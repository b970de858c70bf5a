//! Datasets: MNIST IDX files, synthetic gaussian blobs, and seeded batching.

use crate::binio::ByteReader;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;
/// Size of the deterministic training subset used for desk-scale runs.
pub const DESK_TRAIN_SIZE: usize = 10_000;
/// Environment variable naming the default MNIST directory.
pub const DATA_DIR_ENV: &str = "SPARSEGATE_DATA_DIR";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated at byte {offset}, needed {needed} more bytes")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },
    #[error("{path}: {extra} unexpected trailing bytes")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is outside 0..{classes}")]
    LabelRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid dataset request: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

/// Samples `features[N × ...]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self, DataError> {
        let n = features.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::LabelRange { index, label, classes });
        }
        Ok(Self {
            features,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// The first `n` samples in stored order.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.gather(&(0..n).collect::<Vec<_>>())
    }

    /// Samples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Dataset {
        let (x, y) = self.gather_parts(indices);
        Dataset {
            features: x,
            labels: y,
            classes: self.classes,
            split: self.split,
        }
    }

    fn gather_parts(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let len = self.sample_len();
        let src = self.features.data();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&src[i * len..(i + 1) * len]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let x = Tensor::new(shape, data).expect("gathered length matches shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// SHA-256 over shape, feature bits and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in self.features.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.features.data() {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32, dims: usize) -> Result<(Vec<usize>, &'a [u8]), DataError> {
    let truncated = |offset, needed| DataError::Truncated {
        path: path.to_path_buf(),
        offset,
        needed,
    };
    let mut r = ByteReader::new(bytes);
    let be_u32 = |r: &mut ByteReader<'a>| -> Result<u32, DataError> {
        let raw = r.take(4).map_err(|s| truncated(s.offset, s.needed))?;
        Ok(u32::from_be_bytes(raw.try_into().unwrap()))
    };
    let found = be_u32(&mut r)?;
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let sizes = (0..dims).map(|_| be_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let payload: usize = sizes.iter().product();
    let body = r.take(payload).map_err(|s| truncated(s.offset, s.needed))?;
    if r.remaining() != 0 {
        return Err(DataError::TrailingBytes {
            path: path.to_path_buf(),
            extra: r.remaining(),
        });
    }
    Ok((sizes, body))
}

/// Parses an IDX image/label file pair; pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let image_bytes = read(images_path)?;
    let label_bytes = read(labels_path)?;
    let (dims, pixels) = parse_idx(images_path, &image_bytes, IDX_IMAGES_MAGIC, 3)?;
    let (ldims, labels) = parse_idx(labels_path, &label_bytes, IDX_LABELS_MAGIC, 1)?;
    if dims[0] != ldims[0] {
        return Err(DataError::CountMismatch {
            images: dims[0],
            labels: ldims[0],
        });
    }
    let features = Tensor::new(
        vec![dims[0], 1, dims[1], dims[2]],
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )
    .expect("payload length checked against header");
    let split = if dims[0] == 10_000 { Split::Test } else { Split::Train };
    Dataset::new(
        features,
        labels.iter().map(|&l| l as usize).collect(),
        MNIST_CLASSES,
        split,
    )
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> std::io::Result<()> {
    assert_eq!(pixels.len() % (rows * cols), 0, "pixel count is not a whole number of images");
    let n = pixels.len() / (rows * cols);
    let mut f = std::fs::File::create(path)?;
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(pixels)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)
}

/// Loads a canonical MNIST split from `dir`, optionally keeping only the first `limit` samples.
pub fn load_mnist(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset, DataError> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
        Split::Synthetic => return Err(DataError::Invalid("MNIST has no synthetic split".into())),
    };
    let mut ds = load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.split = split;
    Ok(match limit {
        Some(n) => ds.head(n),
        None => ds,
    })
}

/// Directory from [`DATA_DIR_ENV`], if set.
pub fn default_data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

/// Gaussian class blobs with unit variance and class means at distance 4 from the origin.
pub fn synth_blobs(n: usize, dims: usize, classes: usize, seed: u64) -> Result<Dataset, DataError> {
    synth_blobs_with(n, dims, classes, 4.0, seed)
}

/// Gaussian blobs with unit variance. Each class mean lies at distance
/// `separation` from the origin: along its own axis when `classes <= dims`,
/// otherwise along a random direction.
pub fn synth_blobs_with(
    n: usize,
    dims: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n == 0 || dims == 0 || classes == 0 {
        return Err(DataError::Invalid(format!(
            "synth_blobs needs positive sizes, got n={n} dims={dims} classes={classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= dims {
                (0..dims).map(|d| if d == c { separation } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm * separation).collect()
            }
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * dims);
    for &label in &labels {
        for mean in &means[label] {
            let noise: f64 = rng.sample(StandardNormal);
            data.push((mean + noise) as f32);
        }
    }
    let features = Tensor::new(vec![n, dims], data).expect("n*dims values");
    Dataset::new(features, labels, classes, Split::Synthetic)
}

/// One minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub y: Vec<usize>,
}

/// Iterator over one shuffled pass through a dataset.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let (x, y) = self.ds.gather_parts(&self.order[self.next..end]);
        self.next = end;
        Some(Batch { x, y })
    }
}

/// Fisher-Yates shuffle seeded by `shuffle_seed`; the final partial batch is kept.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: u64) -> Batches<'_> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Batches {
        ds,
        order,
        batch_size,
        next: 0,
    }
}

/// Iterates the dataset in stored order (no shuffle).
pub fn sequential_batches(ds: &Dataset, batch_size: usize) -> Batches<'_> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    Batches {
        ds,
        order: (0..ds.len()).collect(),
        batch_size,
        next: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
        let images = dir.join("img");
        let labels = dir.join("lbl");
        let pixels: Vec<u8> = (0..2 * 3 * 2).map(|i| (i * 23) as u8).collect();
        write_idx_images(&images, 3, 2, &pixels).unwrap();
        write_idx_labels(&labels, &[7, 1]).unwrap();
        (images, labels)
    }

    #[test]
    fn idx_fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = fixture(dir.path());
        let ds = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.features.shape(), &[2, 1, 3, 2]);
        assert_eq!(ds.labels, vec![7, 1]);
        for (i, &v) in ds.features.data().iter().enumerate() {
            assert_eq!(v, ((i * 23) as u8) as f32 / 255.0);
        }
    }

    #[test]
    fn idx_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = fixture(dir.path());

        let mut bytes = std::fs::read(&images).unwrap();
        bytes[3] = 0x02;
        let bad = dir.path().join("bad");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_idx(&bad, &labels),
            Err(DataError::BadMagic { found: 0x802, .. })
        ));

        let bytes = std::fs::read(&images).unwrap();
        std::fs::write(&bad, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&bad, &labels), Err(DataError::Truncated { .. })));

        let three = dir.path().join("three");
        write_idx_labels(&three, &[1, 2, 3]).unwrap();
        assert!(matches!(
            load_idx(&images, &three),
            Err(DataError::CountMismatch { images: 2, labels: 3 })
        ));

        let big = dir.path().join("big");
        write_idx_labels(&big, &[1, 12]).unwrap();
        assert!(matches!(load_idx(&images, &big), Err(DataError::LabelRange { .. })));
    }

    #[test]
    fn synth_is_seeded() {
        let a = synth_blobs(50, 4, 3, 9).unwrap();
        assert_eq!(a, synth_blobs(50, 4, 3, 9).unwrap());
        assert_ne!(a, synth_blobs(50, 4, 3, 10).unwrap());
        assert!(synth_blobs(0, 4, 3, 9).is_err());
    }

    #[test]
    fn batches_cover_dataset() {
        let ds = synth_blobs(23, 2, 2, 1).unwrap();
        let all: Vec<Batch> = batches(&ds, 5, 3).collect();
        assert_eq!(all.len(), 5);
        assert_eq!(all.last().unwrap().y.len(), 3);
        let mut seen: Vec<(Vec<u32>, usize)> = all
            .iter()
            .flat_map(|b| {
                b.x.data()
                    .chunks(2)
                    .map(|c| c.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                    .zip(b.y.clone())
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut expected: Vec<(Vec<u32>, usize)> = ds
            .features
            .data()
            .chunks(2)
            .map(|c| c.iter().map(|v| v.to_bits()).collect())
            .zip(ds.labels.clone())
            .collect();
        seen.sort();
        expected.sort();
        assert_eq!(seen, expected);
    }

    #[test]
    fn batches_are_seeded() {
        let ds = synth_blobs(40, 3, 4, 2).unwrap();
        let a: Vec<Batch> = batches(&ds, 7, 11).collect();
        let b: Vec<Batch> = batches(&ds, 7, 11).collect();
        assert_eq!(a, b);
        let whole: Vec<Batch> = batches(&ds, 40, 11).collect();
        assert_eq!(whole.len(), 1);
        let mut order = whole[0].y.clone();
        assert_ne!(order, ds.labels, "a full batch is a shuffled permutation");
        order.sort();
        let mut labels = ds.labels.clone();
        labels.sort();
        assert_eq!(order, labels);
    }
}
