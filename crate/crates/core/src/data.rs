//! Dataset ingestion (MNIST IDX), synthetic fixtures, and seeded batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MNIST_CLASSES: usize = 10;
const MNIST_SIDE: usize = 28;
const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Which half of the protocol a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in [0,1] laid out [N,C,H,W] with integer class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::IdxParse {
            offset: bytes.len() as u64,
            reason: format!("file truncated inside {} (need {} bytes)", what, end),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

fn parse_idx_images(bytes: &[u8]) -> Result<(usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, "images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::IdxParse {
            offset: 0,
            reason: format!("images magic {:#010x}, want {:#010x}", magic, IMAGES_MAGIC),
        });
    }
    let n = be_u32(bytes, 4, "image count")? as u64;
    let rows = be_u32(bytes, 8, "row count")?;
    let cols = be_u32(bytes, 12, "column count")?;
    if rows as usize != MNIST_SIDE {
        return Err(Error::IdxParse {
            offset: 8,
            reason: format!("row count {}, want {}", rows, MNIST_SIDE),
        });
    }
    if cols as usize != MNIST_SIDE {
        return Err(Error::IdxParse {
            offset: 12,
            reason: format!("column count {}, want {}", cols, MNIST_SIDE),
        });
    }
    let want = 16u64 + n * (MNIST_SIDE * MNIST_SIDE) as u64;
    if bytes.len() as u64 != want {
        return Err(Error::IdxParse {
            offset: (bytes.len() as u64).min(want),
            reason: format!(
                "images payload is {} bytes, header implies {}",
                bytes.len(),
                want
            ),
        });
    }
    let pixels = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((n as usize, pixels))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::IdxParse {
            offset: 0,
            reason: format!("labels magic {:#010x}, want {:#010x}", magic, LABELS_MAGIC),
        });
    }
    let n = be_u32(bytes, 4, "label count")? as u64;
    let want = 8u64 + n;
    if bytes.len() as u64 != want {
        return Err(Error::IdxParse {
            offset: (bytes.len() as u64).min(want),
            reason: format!(
                "labels payload is {} bytes, header implies {}",
                bytes.len(),
                want
            ),
        });
    }
    let mut labels = Vec::with_capacity(n as usize);
    for (i, &b) in bytes[8..].iter().enumerate() {
        if b as usize >= MNIST_CLASSES {
            return Err(Error::IdxParse {
                offset: 8 + i as u64,
                reason: format!("label {} out of range 0..{}", b, MNIST_CLASSES),
            });
        }
        labels.push(b as usize);
    }
    Ok(labels)
}

fn prefix_path(path: &Path, err: Error) -> Error {
    match err {
        Error::IdxParse { offset, reason } => Error::IdxParse {
            offset,
            reason: format!("{}: {}", path.display(), reason),
        },
        other => other,
    }
}

/// Parse a big-endian IDX image/label file pair into a dataset.
///
/// Enforces the canonical MNIST layout exactly: image magic 0x00000803 with
/// dims [N, 28, 28], label magic 0x00000801 with dim [N], matching counts,
/// exact payload lengths, and labels in 0..10. Pixels scale by 1/255.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path)?;
    let (n, pixels) = parse_idx_images(&image_bytes).map_err(|e| prefix_path(images_path, e))?;
    drop(image_bytes);
    let label_bytes = std::fs::read(labels_path)?;
    let labels = parse_idx_labels(&label_bytes).map_err(|e| prefix_path(labels_path, e))?;
    if labels.len() != n {
        return Err(Error::IdxParse {
            offset: 4,
            reason: format!(
                "{} images but {} labels ({} vs {})",
                n,
                labels.len(),
                images_path.display(),
                labels_path.display()
            ),
        });
    }
    let images = Tensor::from_vec(&[n, 1, MNIST_SIDE, MNIST_SIDE], pixels)?;
    Ok(Dataset {
        images,
        labels,
        split,
        classes: MNIST_CLASSES,
    })
}

/// Seeded, linearly separable Gaussian blobs: one unit-spread cluster per
/// class, centers 6 apart on coordinate axes, class-major sample order.
/// Images come out [N,1,1,dim] so MLPs consume them like flattened pixels.
pub fn make_synthetic(classes: usize, dim: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if classes < 1 || dim < 1 || per_class < 1 {
        return Err(Error::Config(format!(
            "synthetic dataset needs positive counts: classes {}, dim {}, per-class {}",
            classes, dim, per_class
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut pixels = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        let axis = c % dim;
        let level = 6.0 * (1 + c / dim) as f64;
        for _ in 0..per_class {
            for d in 0..dim {
                let center = if d == axis { level } else { 0.0 };
                let noise: f64 = rng.sample(StandardNormal);
                pixels.push(center + noise);
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 1, 1, dim], pixels)?,
        labels,
        split: Split::Train,
        classes,
    })
}

/// One epoch's visiting order: a seeded permutation chunked into minibatches,
/// short final batch kept.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    batch_size: usize,
    permutation: Vec<usize>,
}

impl BatchPlan {
    /// Build the plan for `epoch` (1-based) over `n` samples. The shuffle
    /// stream depends only on (seed, epoch), never on prior epochs.
    pub fn new(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchPlan> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::Config(format!(
                "batch size {} invalid for dataset of {} samples",
                batch_size, n
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut permutation: Vec<usize> = (0..n).collect();
        permutation.shuffle(&mut rng);
        Ok(BatchPlan {
            batch_size,
            permutation,
        })
    }

    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.permutation.chunks(self.batch_size)
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }
}

/// Copy the selected samples into a fresh batch tensor + label vector.
pub fn gather(ds: &Dataset, indices: &[usize]) -> (Tensor, Vec<usize>) {
    let row: usize = ds.images.shape()[1..].iter().product();
    let mut shape = ds.images.shape().to_vec();
    shape[0] = indices.len();
    let mut data = Vec::with_capacity(indices.len() * row);
    let src = ds.images.data();
    for &i in indices {
        data.extend_from_slice(&src[i * row..(i + 1) * row]);
    }
    let images = Tensor::from_vec(&shape, data).expect("gather shape");
    let labels = indices.iter().map(|&i| ds.labels[i]).collect();
    (images, labels)
}
