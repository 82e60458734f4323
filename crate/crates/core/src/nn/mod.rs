//! Minimal dense/convolutional network engine.
//!
//! Supports exactly the two architectures used by the zoos: a fully
//! connected net with a single 128-unit hidden layer, and a convnet with
//! three stride-2 3x3 convolutions followed by global average pooling and a
//! dense output layer. Forward, per-example backward and metrics are pure
//! functions over immutable parameters, so callers may fan them out across
//! worker threads freely.

mod backward;
mod forward;
mod init;

pub use backward::{backward_batch_mean, backward_per_example, GRAD_CHUNK};
pub use forward::{forward, loss_and_accuracy, log_softmax_rows};
pub use init::init_params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    ReLU,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    GlorotNormal,
    Normal,
    TruncatedNormal,
    Orthogonal,
    HeNormal,
}

impl InitScheme {
    pub const ALL: [InitScheme; 5] = [
        InitScheme::GlorotNormal,
        InitScheme::Normal,
        InitScheme::TruncatedNormal,
        InitScheme::Orthogonal,
        InitScheme::HeNormal,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchKind {
    Fcn,
    Cnn,
}

/// One of the two supported network architectures.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchKind,
    /// Input image shape (height, width, channels).
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    /// Hidden layer width; FCN only.
    pub hidden_width: usize,
    /// Filter counts of the three conv layers; CNN only.
    pub conv_filters: Vec<usize>,
    pub activation: Activation,
}

/// Kernel size and stride of every conv layer.
pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 2;

impl Architecture {
    /// The paper's fully connected net: one hidden layer of 128 units.
    pub fn fcn(input_shape: (usize, usize, usize), activation: Activation) -> Self {
        Self {
            kind: ArchKind::Fcn,
            input_shape,
            num_classes: 10,
            hidden_width: 128,
            conv_filters: Vec::new(),
            activation,
        }
    }

    /// The paper's convnet: three 3x3 stride-2 convolutions (16 filters
    /// each), global average pooling and a dense output layer.
    pub fn cnn(input_shape: (usize, usize, usize), activation: Activation) -> Self {
        Self {
            kind: ArchKind::Cnn,
            input_shape,
            num_classes: 10,
            hidden_width: 0,
            conv_filters: vec![16, 16, 16],
            activation,
        }
    }

    pub fn num_layers(&self) -> usize {
        match self.kind {
            ArchKind::Fcn => 2,
            ArchKind::Cnn => self.conv_filters.len() + 1,
        }
    }

    fn input_dim(&self) -> usize {
        let (h, w, c) = self.input_shape;
        h * w * c
    }

    /// Spatial dims after each conv layer under SAME padding and stride 2
    /// (ceil division).
    pub fn conv_spatial_dims(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w, _) = self.input_shape;
        let mut out = Vec::with_capacity(self.conv_filters.len());
        for _ in &self.conv_filters {
            h = h.div_ceil(CONV_STRIDE);
            w = w.div_ceil(CONV_STRIDE);
            out.push((h, w));
        }
        out
    }

    /// Kernel shape and bias length for every layer, in order.
    pub fn layer_shapes(&self) -> Vec<(Vec<usize>, usize)> {
        match self.kind {
            ArchKind::Fcn => vec![
                (vec![self.input_dim(), self.hidden_width], self.hidden_width),
                (vec![self.hidden_width, self.num_classes], self.num_classes),
            ],
            ArchKind::Cnn => {
                let mut shapes = Vec::with_capacity(self.num_layers());
                let mut cin = self.input_shape.2;
                for &cout in &self.conv_filters {
                    shapes.push((vec![CONV_KERNEL, CONV_KERNEL, cin, cout], cout));
                    cin = cout;
                }
                shapes.push((vec![cin, self.num_classes], self.num_classes));
                shapes
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(k, b)| k.iter().product::<usize>() + b)
            .sum()
    }

    pub(crate) fn validate_input<T: Scalar>(&self, batch: &Batch<T>) -> Result<()> {
        let (h, w, c) = self.input_shape;
        if batch.inputs.shape() != [batch.len(), h, w, c] {
            return Err(Error::ShapeMismatch(format!(
                "batch inputs {:?} do not match architecture input {}x{}x{}",
                batch.inputs.shape(),
                h,
                w,
                c
            )));
        }
        Ok(())
    }
}

/// Kernel and bias of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// All trainable parameters of a model, layer by layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(kshape, blen)| Layer {
                kernel: Tensor::zeros(kshape),
                bias: Tensor::zeros(vec![blen]),
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                kernel: Tensor::zeros(l.kernel.shape().to_vec()),
                bias: Tensor::zeros(l.bias.shape().to_vec()),
            })
            .collect();
        Self { layers }
    }

    pub fn value_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.kernel.len() + l.bias.len())
            .sum()
    }

    pub fn shapes_match(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.kernel.shape() == b.kernel.shape() && a.bias.shape() == b.bias.shape()
            })
    }

    pub fn iter_values(&self) -> impl Iterator<Item = &T> {
        self.layers
            .iter()
            .flat_map(|l| l.kernel.data().iter().chain(l.bias.data().iter()))
    }

    pub fn for_each_value_mut(&mut self, mut f: impl FnMut(&mut T)) {
        for l in &mut self.layers {
            for v in l.kernel.data_mut() {
                f(v);
            }
            for v in l.bias.data_mut() {
                f(v);
            }
        }
    }

    /// Applies `f(self_value, other_value)` over every parameter pair.
    pub fn zip_apply(&mut self, other: &Self, mut f: impl FnMut(&mut T, T)) {
        debug_assert!(self.shapes_match(other));
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.kernel.data_mut().iter_mut().zip(b.kernel.data()) {
                f(x, *y);
            }
            for (x, y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                f(x, *y);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.for_each_value_mut(|v| *v *= s);
    }

    /// self += s * other
    pub fn add_scaled(&mut self, other: &Self, s: T) {
        self.zip_apply(other, |a, b| *a += s * b);
    }

    /// Global L2 norm over all kernels and biases concatenated.
    pub fn global_l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.kernel.sq_norm_f64() + l.bias.sq_norm_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.kernel.is_finite() && l.bias.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    kernel: l.kernel.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}

/// A minibatch of images with class labels.
#[derive(Clone, Debug)]
pub struct Batch<T = f32> {
    pub inputs: Tensor<T>,
    pub labels: Vec<u8>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<u8>) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "inputs {:?} vs {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("batch must be nonempty".into()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// A new batch containing the selected examples, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Batch<T> {
        let row: usize = self.inputs.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        Batch {
            inputs: Tensor::new(shape, data).expect("gather preserves row size"),
            labels,
        }
    }
}
