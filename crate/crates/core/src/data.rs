//! Datasets: MNIST IDX files (optionally gzip-compressed) and a synthetic
//! Gaussian-cluster image generator.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, IdxError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `[N, C, H, W]` in `[0, 1]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// A mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("images {:?}, {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let len = self.sample_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&src[i * len..(i + 1) * len]);
        }
        let [c, h, w] = self.sample_shape();
        Batch {
            images: Tensor::from_parts(vec![indices.len(), c, h, w], data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Samples `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        let b = self.batch(&idx);
        Dataset {
            images: b.images,
            labels: b.labels,
            classes: self.classes,
        }
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        (self.slice(0, n), self.slice(n, self.len()))
    }

    /// Sequential batches covering every sample; the last may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let bs = batch_size.max(1);
        (0..self.len()).step_by(bs).map(move |s| {
            let idx: Vec<usize> = (s..(s + bs).min(self.len())).collect();
            self.batch(&idx)
        })
    }

    /// Shuffled full batches for one epoch; a trailing partial batch is dropped.
    pub fn epoch_batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks_exact(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.len() / batch_size.max(1)
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            what,
            expected: at + 4,
            got: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0, "header")?;
    if found == expected {
        return Ok(());
    }
    // same dimensionality, different element type
    if found >> 16 == 0 && found & 0xff == expected & 0xff && (found >> 8) & 0xff != 0x08 {
        return Err(IdxError::ElementType(((found >> 8) & 0xff) as u8));
    }
    Err(IdxError::BadMagic { expected, found })
}

/// Parses an IDX3 unsigned-byte image file into `[N, 1, H, W]` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>, IdxError> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4, "header")? as usize;
    let h = read_u32(bytes, 8, "header")? as usize;
    let w = read_u32(bytes, 12, "header")? as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            what: "image data",
            expected: need,
            got: bytes.len(),
        });
    }
    let data = bytes[16..need].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::from_parts(vec![n, 1, h, w], data))
}

/// Parses an IDX1 unsigned-byte label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    check_magic(bytes, LABELS_MAGIC)?;
    let n = read_u32(bytes, 4, "header")? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            what: "label data",
            expected: need,
            got: bytes.len(),
        });
    }
    Ok(bytes[8..need].iter().map(|&b| b as usize).collect())
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::file(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads an MNIST-style image/label file pair (plain or `.gz`).
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let imgs = parse_idx_images(&read_maybe_gz(images)?)?;
    let labs = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if imgs.shape()[0] != labs.len() {
        return Err(IdxError::CountMismatch {
            images: imgs.shape()[0],
            labels: labs.len(),
        }
        .into());
    }
    let classes = labs.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(imgs, labs, classes)
}

/// Encodes images (values in `[0, 1]`) and labels as IDX byte streams.
pub fn encode_idx(images: &Tensor<f32>, labels: &[usize]) -> (Vec<u8>, Vec<u8>) {
    let s = images.shape();
    let mut img = Vec::with_capacity(16 + images.numel());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [s[0], s[2], s[3]] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend(labels.iter().map(|&l| l as u8));
    (img, lab)
}

/// Gaussian-cluster classification images: each class has a random
/// prototype and samples add isotropic noise, clipped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    pub shape: [usize; 3],
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples: 1000,
            classes: 10,
            shape: [1, 28, 28],
            noise: 0.3,
            seed: 0,
        }
    }
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.shape.contains(&0) {
        return Err(Error::Config("synthetic dataset needs classes and a non-empty shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let len: usize = spec.shape.iter().product();
    let protos: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| (0..len).map(|_| rng.random::<f32>()).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(spec.samples * len);
    let mut labels = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let c = rng.random_range(0..spec.classes);
        labels.push(c);
        data.extend(
            protos[c]
                .iter()
                .map(|&p| (p as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32),
        );
    }
    let [c, h, w] = spec.shape;
    Dataset::new(Tensor::from_parts(vec![spec.samples, c, h, w], data), labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip() {
        let ds = synthetic(&SyntheticSpec {
            samples: 5,
            shape: [1, 4, 3],
            ..Default::default()
        })
        .unwrap();
        let (img, lab) = encode_idx(&ds.images, &ds.labels);
        let back = parse_idx_images(&img).unwrap();
        assert_eq!(back.shape(), &[5, 1, 4, 3]);
        assert_eq!(parse_idx_labels(&lab).unwrap(), ds.labels);
    }

    #[test]
    fn wrong_magic_names_both() {
        let (img, lab) = encode_idx(&Tensor::zeros(&[1, 1, 2, 2]), &[0]);
        match parse_idx_images(&lab) {
            Err(IdxError::BadMagic { expected, found }) => {
                assert_eq!((expected, found), (IMAGES_MAGIC, LABELS_MAGIC));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_idx_labels(&img).is_err());
    }

    #[test]
    fn truncation_is_an_error() {
        let (img, lab) = encode_idx(&Tensor::zeros(&[2, 1, 2, 2]), &[0, 1]);
        assert!(matches!(
            parse_idx_images(&img[..img.len() - 1]),
            Err(IdxError::Truncated { .. })
        ));
        assert!(matches!(
            parse_idx_labels(&lab[..lab.len() - 1]),
            Err(IdxError::Truncated { .. })
        ));
        assert!(parse_idx_images(&img[..3]).is_err());
    }

    #[test]
    fn batches_cover_dataset() {
        let ds = synthetic(&SyntheticSpec {
            samples: 10,
            shape: [1, 2, 2],
            ..Default::default()
        })
        .unwrap();
        let sizes: Vec<usize> = ds.batches(4).map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(ds.epoch_batches(4, &mut rng).len(), 2);
    }
}
