//! Forward pass and classification metrics.

use crate::error::{Error, Result};
use crate::nn::{Activation, ArchKind, Architecture, Batch, ModelParams, CONV_KERNEL, CONV_STRIDE};
use crate::tensor::{Scalar, Tensor};

/// Per-example intermediate buffers, reused across examples.
///
/// `acts[0]` is the (flattened) input; `acts[l]` for l >= 1 holds the
/// post-activation output of layer l (for the CNN, `acts[4]` is the pooled
/// vector). Activations suffice for backprop: tanh' = 1 - h^2 and
/// relu' = [h > 0] are both functions of the output.
pub(crate) struct Scratch<T> {
    pub acts: Vec<Vec<T>>,
    pub logits: Vec<T>,
}

impl<T: Scalar> Scratch<T> {
    pub fn new() -> Self {
        Scratch {
            acts: Vec::new(),
            logits: Vec::new(),
        }
    }
}

pub(crate) fn validate_params<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
) -> Result<()> {
    let shapes = arch.layer_shapes();
    if params.layers.len() != shapes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} layers in params, architecture has {}",
            params.layers.len(),
            shapes.len()
        )));
    }
    for (i, (layer, (kshape, blen))) in params.layers.iter().zip(&shapes).enumerate() {
        if layer.kernel.shape() != &kshape[..] || layer.bias.len() != *blen {
            return Err(Error::ShapeMismatch(format!(
                "layer {i}: kernel {:?}/bias {} vs expected {:?}/{}",
                layer.kernel.shape(),
                layer.bias.len(),
                kshape,
                blen
            )));
        }
    }
    Ok(())
}

fn apply_activation<T: Scalar>(act: Activation, xs: &mut [T]) {
    match act {
        Activation::Tanh => {
            for x in xs {
                *x = x.tanh();
            }
        }
        Activation::ReLU => {
            let zero = T::zero();
            for x in xs {
                if *x < zero {
                    *x = zero;
                }
            }
        }
    }
}

/// y = x * K + b for a single example; K is [in, out] row-major.
fn dense<T: Scalar>(x: &[T], kernel: &[T], bias: &[T], out: &mut Vec<T>) {
    let n_out = bias.len();
    out.clear();
    out.extend_from_slice(bias);
    for (i, &a) in x.iter().enumerate() {
        let krow = &kernel[i * n_out..(i + 1) * n_out];
        for (o, &k) in out.iter_mut().zip(krow) {
            *o += a * k;
        }
    }
}

/// SAME padding offsets for one spatial dimension (TF convention: the
/// total padding is split with the smaller half leading).
pub(crate) fn same_pad(in_dim: usize, out_dim: usize) -> usize {
    let total = ((out_dim - 1) * CONV_STRIDE + CONV_KERNEL).saturating_sub(in_dim);
    total / 2
}

/// 3x3 stride-2 SAME convolution of a single [h, w, cin] example.
fn conv2d<T: Scalar>(
    input: &[T],
    (h, w, cin): (usize, usize, usize),
    kernel: &[T],
    bias: &[T],
    out: &mut Vec<T>,
) {
    let cout = bias.len();
    let oh = h.div_ceil(CONV_STRIDE);
    let ow = w.div_ceil(CONV_STRIDE);
    let pad_top = same_pad(h, oh);
    let pad_left = same_pad(w, ow);
    out.clear();
    out.resize(oh * ow * cout, T::zero());
    for oy in 0..oh {
        for ox in 0..ow {
            let o_base = (oy * ow + ox) * cout;
            out[o_base..o_base + cout].copy_from_slice(bias);
            for ky in 0..CONV_KERNEL {
                let iy = (oy * CONV_STRIDE + ky) as isize - pad_top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..CONV_KERNEL {
                    let ix = (ox * CONV_STRIDE + kx) as isize - pad_left as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = (iy as usize * w + ix as usize) * cin;
                    let k_base = (ky * CONV_KERNEL + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = input[in_base + ci];
                        let krow = &kernel[k_base + ci * cout..k_base + (ci + 1) * cout];
                        let orow = &mut out[o_base..o_base + cout];
                        for (o, &k) in orow.iter_mut().zip(krow) {
                            *o += a * k;
                        }
                    }
                }
            }
        }
    }
}

/// Forward one example, leaving all intermediates in `scratch`.
pub(crate) fn forward_one<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
    x: &[T],
    scratch: &mut Scratch<T>,
) {
    let n_layers = match arch.kind {
        ArchKind::Fcn => 2,
        ArchKind::Cnn => arch.conv_filters.len() + 2, // + pooled vector slot
    };
    scratch.acts.resize(n_layers, Vec::new());
    scratch.acts[0].clear();
    scratch.acts[0].extend_from_slice(x);

    match arch.kind {
        ArchKind::Fcn => {
            let (input, rest) = scratch.acts.split_at_mut(1);
            dense(
                &input[0],
                params.layers[0].kernel.data(),
                params.layers[0].bias.data(),
                &mut rest[0],
            );
            apply_activation(arch.activation, &mut rest[0]);
            dense(
                &rest[0],
                params.layers[1].kernel.data(),
                params.layers[1].bias.data(),
                &mut scratch.logits,
            );
        }
        ArchKind::Cnn => {
            let (mut h, mut w, _) = arch.input_shape;
            for (l, layer) in params.layers[..arch.conv_filters.len()].iter().enumerate() {
                let cin = layer.kernel.shape()[2];
                let (prev, cur) = scratch.acts.split_at_mut(l + 1);
                conv2d(
                    &prev[l],
                    (h, w, cin),
                    layer.kernel.data(),
                    layer.bias.data(),
                    &mut cur[0],
                );
                apply_activation(arch.activation, &mut cur[0]);
                h = h.div_ceil(CONV_STRIDE);
                w = w.div_ceil(CONV_STRIDE);
            }
            // Global average pool over the final feature map.
            let n_conv = arch.conv_filters.len();
            let cout = arch.conv_filters[n_conv - 1];
            let pixels = h * w;
            let inv = T::from_f64_lossy(1.0 / pixels as f64);
            let (prev, pooled) = scratch.acts.split_at_mut(n_conv + 1);
            let fmap = &prev[n_conv];
            let gap = &mut pooled[0];
            gap.clear();
            gap.resize(cout, T::zero());
            for p in 0..pixels {
                let base = p * cout;
                for (c, g) in gap.iter_mut().enumerate() {
                    *g += fmap[base + c];
                }
            }
            for g in gap.iter_mut() {
                *g *= inv;
            }
            let dense_layer = params.layers.last().unwrap();
            dense(
                gap,
                dense_layer.kernel.data(),
                dense_layer.bias.data(),
                &mut scratch.logits,
            );
        }
    }
}

/// Batched forward pass: logits of shape [N, num_classes].
pub fn forward<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
    batch: &Batch<T>,
) -> Result<Tensor<T>> {
    arch.validate_input(batch)?;
    validate_params(arch, params)?;
    let n = batch.len();
    let classes = arch.num_classes;
    let row: usize = batch.inputs.shape()[1..].iter().product();
    let mut logits = vec![T::zero(); n * classes];
    let mut scratch = Scratch::new();
    for i in 0..n {
        let x = &batch.inputs.data()[i * row..(i + 1) * row];
        forward_one(arch, params, x, &mut scratch);
        logits[i * classes..(i + 1) * classes].copy_from_slice(&scratch.logits);
    }
    Tensor::new(vec![n, classes], logits)
}

/// Row-wise log-softmax, computed with max subtraction.
pub fn log_softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected [N, C] logits, got {shape:?}"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(n * c);
    for row in logits.data().chunks_exact(c) {
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|&x| T::from_f64_lossy(x.to_f64_lossy() - lse)));
    }
    Tensor::new(vec![n, c], out)
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let m = row
        .iter()
        .map(|v| v.to_f64_lossy())
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v.to_f64_lossy() - m).exp()).sum();
    m + s.ln()
}

/// Mean cross-entropy (stable log-softmax) and accuracy (argmax with ties
/// broken toward the lowest class index).
pub fn loss_and_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(f64, f64)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let c = shape[1];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let lse = log_sum_exp(row);
        loss += lse - row[label as usize].to_f64_lossy();
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = j;
            }
        }
        if best == label as usize {
            correct += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((loss / n, correct as f64 / n))
}
