//! Per-example and aggregate backpropagation of the cross-entropy loss.

use rayon::prelude::*;

use crate::error::Result;
use crate::nn::forward::{forward_one, same_pad, validate_params, Scratch};
use crate::nn::{Activation, ArchKind, Architecture, Batch, ModelParams, CONV_KERNEL, CONV_STRIDE};
use crate::tensor::Scalar;

struct BwdScratch<T> {
    fwd: Scratch<T>,
    d_cur: Vec<T>,
    d_prev: Vec<T>,
}

impl<T: Scalar> BwdScratch<T> {
    fn new() -> Self {
        BwdScratch {
            fwd: Scratch::new(),
            d_cur: Vec::new(),
            d_prev: Vec::new(),
        }
    }
}

/// dLoss/dActivation -> dLoss/dPreactivation, using the activation output.
fn apply_activation_grad<T: Scalar>(act: Activation, h: &[T], dh: &mut [T]) {
    match act {
        Activation::Tanh => {
            for (d, &a) in dh.iter_mut().zip(h) {
                *d = *d * (T::one() - a * a);
            }
        }
        Activation::ReLU => {
            let zero = T::zero();
            for (d, &a) in dh.iter_mut().zip(h) {
                if a <= zero {
                    *d = zero;
                }
            }
        }
    }
}

/// Accumulates the gradient of one example's cross-entropy into `grad`.
fn backward_one<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
    x: &[T],
    label: u8,
    scratch: &mut BwdScratch<T>,
    grad: &mut ModelParams<T>,
) {
    forward_one(arch, params, x, &mut scratch.fwd);

    // dlogits = softmax(logits) - onehot(label)
    let logits = &scratch.fwd.logits;
    let m = logits
        .iter()
        .map(|v| v.to_f64_lossy())
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v.to_f64_lossy() - m).exp()).sum();
    let mut dlogits: Vec<T> = logits
        .iter()
        .map(|v| T::from_f64_lossy((v.to_f64_lossy() - m).exp() / z))
        .collect();
    dlogits[label as usize] -= T::one();

    let classes = arch.num_classes;
    let last = params.layers.len() - 1;

    // Dense head (both architectures): input is the last stored activation.
    let head_in_idx = scratch.fwd.acts.len() - 1;
    {
        let head_in = &scratch.fwd.acts[head_in_idx];
        let gl = &mut grad.layers[last];
        let gk = gl.kernel.data_mut();
        for (i, &a) in head_in.iter().enumerate() {
            let row = &mut gk[i * classes..(i + 1) * classes];
            for (g, &d) in row.iter_mut().zip(&dlogits) {
                *g += a * d;
            }
        }
        for (g, &d) in gl.bias.data_mut().iter_mut().zip(&dlogits) {
            *g += d;
        }
    }

    // d(head input)
    let head_kernel = params.layers[last].kernel.data();
    let head_in_len = scratch.fwd.acts[head_in_idx].len();
    scratch.d_cur.clear();
    scratch.d_cur.resize(head_in_len, T::zero());
    for (i, d) in scratch.d_cur.iter_mut().enumerate() {
        let row = &head_kernel[i * classes..(i + 1) * classes];
        let mut acc = T::zero();
        for (&k, &dl) in row.iter().zip(&dlogits) {
            acc += k * dl;
        }
        *d = acc;
    }

    match arch.kind {
        ArchKind::Fcn => {
            // d_cur holds da1; convert to dz1 and accumulate layer 0.
            let a1 = &scratch.fwd.acts[1];
            apply_activation_grad(arch.activation, a1, &mut scratch.d_cur);
            let hidden = a1.len();
            let gl = &mut grad.layers[0];
            let gk = gl.kernel.data_mut();
            for (i, &xi) in x.iter().enumerate() {
                let row = &mut gk[i * hidden..(i + 1) * hidden];
                for (g, &d) in row.iter_mut().zip(&scratch.d_cur) {
                    *g += xi * d;
                }
            }
            for (g, &d) in gl.bias.data_mut().iter_mut().zip(&scratch.d_cur) {
                *g += d;
            }
        }
        ArchKind::Cnn => {
            let n_conv = arch.conv_filters.len();
            let dims = arch.conv_spatial_dims();
            // Spread the pooled gradient back over the final feature map.
            let (fh, fw) = dims[n_conv - 1];
            let cout = arch.conv_filters[n_conv - 1];
            let pixels = fh * fw;
            let inv = T::from_f64_lossy(1.0 / pixels as f64);
            let dgap = std::mem::take(&mut scratch.d_cur);
            scratch.d_cur = Vec::with_capacity(pixels * cout);
            for _ in 0..pixels {
                scratch.d_cur.extend(dgap.iter().map(|&d| d * inv));
            }

            for l in (0..n_conv).rev() {
                let (oh, ow) = dims[l];
                let (ih, iw) = if l == 0 {
                    (arch.input_shape.0, arch.input_shape.1)
                } else {
                    dims[l - 1]
                };
                let cin = params.layers[l].kernel.shape()[2];
                let co_n = params.layers[l].kernel.shape()[3];
                let h_out = &scratch.fwd.acts[l + 1];
                apply_activation_grad(arch.activation, h_out, &mut scratch.d_cur);

                let input = &scratch.fwd.acts[l];
                let want_dinput = l > 0;
                scratch.d_prev.clear();
                scratch.d_prev.resize(ih * iw * cin, T::zero());

                let pad_top = same_pad(ih, oh);
                let pad_left = same_pad(iw, ow);
                let kernel = params.layers[l].kernel.data();
                let gl = &mut grad.layers[l];
                let gk = gl.kernel.data_mut();
                let gb = gl.bias.data_mut();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let dz = &scratch.d_cur[(oy * ow + ox) * co_n..(oy * ow + ox + 1) * co_n];
                        for (b, &d) in gb.iter_mut().zip(dz) {
                            *b += d;
                        }
                        for ky in 0..CONV_KERNEL {
                            let iy = (oy * CONV_STRIDE + ky) as isize - pad_top as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            for kx in 0..CONV_KERNEL {
                                let ix = (ox * CONV_STRIDE + kx) as isize - pad_left as isize;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                let in_base = (iy as usize * iw + ix as usize) * cin;
                                let k_base = (ky * CONV_KERNEL + kx) * cin * co_n;
                                for ci in 0..cin {
                                    let a = input[in_base + ci];
                                    let krow = &kernel[k_base + ci * co_n..k_base + (ci + 1) * co_n];
                                    let grow = &mut gk[k_base + ci * co_n..k_base + (ci + 1) * co_n];
                                    let mut din = T::zero();
                                    for ((g, &k), &d) in grow.iter_mut().zip(krow).zip(dz) {
                                        *g += a * d;
                                        din += k * d;
                                    }
                                    if want_dinput {
                                        scratch.d_prev[in_base + ci] += din;
                                    }
                                }
                            }
                        }
                    }
                }
                std::mem::swap(&mut scratch.d_cur, &mut scratch.d_prev);
            }
        }
    }
}

/// Gradient of each example's own cross-entropy, one `ModelParams` per
/// example, in batch order. The mean over the list equals the aggregate
/// minibatch gradient up to summation rounding.
pub fn backward_per_example<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
    batch: &Batch<T>,
) -> Result<Vec<ModelParams<T>>> {
    arch.validate_input(batch)?;
    validate_params(arch, params)?;
    let row: usize = batch.inputs.shape()[1..].iter().product();
    let grads = (0..batch.len())
        .into_par_iter()
        .map_init(BwdScratch::new, |scratch, i| {
            let mut grad = ModelParams::zeros(arch);
            let x = &batch.inputs.data()[i * row..(i + 1) * row];
            backward_one(arch, params, x, batch.labels[i], scratch, &mut grad);
            grad
        })
        .collect();
    Ok(grads)
}

/// Examples per accumulation chunk, shared by the aggregate path and the
/// DP per-example path so the two stay bitwise comparable.
pub const GRAD_CHUNK: usize = 32;

/// Mean cross-entropy gradient of the whole batch.
///
/// Each example's gradient is finished before being added to the running
/// sum, in fixed chunk order, so the result is bitwise identical to summing
/// the [`backward_per_example`] list and does not depend on the worker
/// thread count.
pub fn backward_batch_mean<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
    batch: &Batch<T>,
) -> Result<ModelParams<T>> {
    arch.validate_input(batch)?;
    validate_params(arch, params)?;
    let row: usize = batch.inputs.shape()[1..].iter().product();
    let n = batch.len();
    let chunk_sums: Vec<ModelParams<T>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map_init(
            || (BwdScratch::new(), ModelParams::zeros(arch)),
            |(scratch, tmp), chunk| {
                let mut acc = ModelParams::zeros(arch);
                for &i in chunk {
                    tmp.for_each_value_mut(|v| *v = T::zero());
                    let x = &batch.inputs.data()[i * row..(i + 1) * row];
                    backward_one(arch, params, x, batch.labels[i], scratch, tmp);
                    acc.add_scaled(tmp, T::one());
                }
                acc
            },
        )
        .collect();
    let mut total = ModelParams::zeros(arch);
    for s in &chunk_sums {
        total.add_scaled(s, T::one());
    }
    total.scale(T::from_f64_lossy(1.0 / n as f64));
    Ok(total)
}
