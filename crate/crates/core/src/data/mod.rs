//! Dataset loading and preparation.
//!
//! Everything downstream consumes grayscale images scaled to [0, 1] with
//! labels in [0, 10). Datasets arrive either as IDX file pairs (MNIST's
//! native format; CIFAR-10 and SVHN are converted to it by [`convert`]) or
//! from the synthetic generator used by fast tests and desk-scale runs.

mod idx;
mod synth;

pub mod convert;

pub use idx::{load_idx_pair, write_idx_images, write_idx_labels};
pub use synth::{synthetic_dataset, synthetic_dataset_with_noise};

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::stream_rng;
use crate::tensor::{Scalar, Tensor};

pub const NUM_CLASSES: usize = 10;

/// One split of a dataset: images [N, H, W, C] in [0, 1] plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl DataSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// View the whole split as a batch in the requested precision.
    pub fn as_batch<T: Scalar>(&self) -> Batch<T> {
        Batch::new(self.images.cast(), self.labels.clone()).expect("split is a valid batch")
    }
}

/// A named train/test pair.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub train: DataSplit,
    pub test: DataSplit,
    pub image_shape: (usize, usize, usize),
}

/// Load a dataset from `<dir>/{train,test}-{images,labels}-idx?-ubyte`.
pub fn load_idx_dataset(name: &str, dir: &Path) -> Result<Dataset> {
    let train = load_idx_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx_pair(
        &dir.join("test-images-idx3-ubyte"),
        &dir.join("test-labels-idx1-ubyte"),
    )?;
    if train.image_shape() != test.image_shape() {
        return Err(Error::ShapeMismatch(format!(
            "train images {:?} vs test images {:?}",
            train.image_shape(),
            test.image_shape()
        )));
    }
    let image_shape = train.image_shape();
    Ok(Dataset {
        name: name.to_string(),
        train,
        test,
        image_shape,
    })
}

/// ITU-R BT.601 luma: y = 0.299 R + 0.587 G + 0.114 B, per pixel.
pub fn to_grayscale(rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = rgb.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected [N, H, W, 3] input, got {shape:?}"
        )));
    }
    let out_shape = vec![shape[0], shape[1], shape[2], 1];
    let data = rgb
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    Tensor::new(out_shape, data)
}

/// Uniform sample of floor(fraction * N) examples without replacement,
/// deterministic per seed. A fraction of exactly 1.0 keeps the original
/// order.
pub fn subset_fraction(split: &DataSplit, fraction: f64, seed: u64) -> Result<DataSplit> {
    if !(0.3..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in [0.3, 1.0], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(split.clone());
    }
    let n = split.len();
    let count = ((n as f64 * fraction) + 1e-9).floor() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, 0);
    // Partial Fisher-Yates: the first `count` entries are a uniform sample.
    for i in 0..count {
        let j = i + rand::Rng::random_range(&mut rng, 0..n - i);
        indices.swap(i, j);
    }
    let mut picked = indices[..count].to_vec();
    picked.sort_unstable();

    let row: usize = split.images.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(count * row);
    let mut labels = Vec::with_capacity(count);
    for &i in &picked {
        data.extend_from_slice(&split.images.data()[i * row..(i + 1) * row]);
        labels.push(split.labels[i]);
    }
    let mut shape = split.images.shape().to_vec();
    shape[0] = count;
    Ok(DataSplit {
        images: Tensor::new(shape, data)?,
        labels,
    })
}
