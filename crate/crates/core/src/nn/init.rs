//! Weight initialization.
//!
//! Five schemes, matching the zoo hyperparameter grid. The sampled standard
//! deviation parameterizes the plain and truncated normal schemes; Glorot,
//! He and orthogonal define their own scale and ignore it.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Architecture, InitScheme, Layer, ModelParams};
use crate::rng::stream_rng;
use crate::tensor::{Scalar, Tensor};

/// Initialize model parameters. Deterministic given `seed`; biases are zero.
pub fn init_params<T: Scalar>(
    arch: &Architecture,
    scheme: InitScheme,
    std: f64,
    seed: u64,
) -> Result<ModelParams<T>> {
    if matches!(scheme, InitScheme::Normal | InitScheme::TruncatedNormal) && std <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "std must be positive for normal schemes, got {std}"
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(kshape, blen)| {
            let fan = kernel_fans(&kshape);
            let values = match scheme {
                InitScheme::GlorotNormal => {
                    let s = (2.0 / (fan.0 + fan.1) as f64).sqrt();
                    normal_values(&kshape, s, &mut rng)
                }
                InitScheme::HeNormal => {
                    let s = (2.0 / fan.0 as f64).sqrt();
                    normal_values(&kshape, s, &mut rng)
                }
                InitScheme::Normal => normal_values(&kshape, std, &mut rng),
                InitScheme::TruncatedNormal => truncated_normal_values(&kshape, std, &mut rng),
                InitScheme::Orthogonal => orthogonal_values(&kshape, &mut rng),
            };
            Layer {
                kernel: Tensor::new(kshape, values.into_iter().map(T::from_f64_lossy).collect())
                    .expect("init length matches shape"),
                bias: Tensor::zeros(vec![blen]),
            }
        })
        .collect();
    Ok(ModelParams { layers })
}

/// (fan_in, fan_out) of a kernel: dense kernels are [in, out]; conv kernels
/// are [kh, kw, cin, cout] with receptive-field scaling.
fn kernel_fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        4 => {
            let rf = shape[0] * shape[1];
            (rf * shape[2], rf * shape[3])
        }
        _ => unreachable!("kernels are rank 2 or 4"),
    }
}

fn normal_values(shape: &[usize], std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect()
}

/// Normal draws, resampled until within two standard deviations.
fn truncated_normal_values(shape: &[usize], std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                return z * std;
            }
        })
        .collect()
}

/// Semi-orthogonal init: the kernel is flattened to a matrix with
/// `rows = prod(shape[..last])` and `cols = shape[last]`, whose columns (or
/// rows, if rows < cols) are orthonormal.
fn orthogonal_values(shape: &[usize], rng: &mut impl Rng) -> Vec<f64> {
    let cols = *shape.last().unwrap();
    let rows: usize = shape.iter().product::<usize>() / cols;
    let flip = rows < cols;
    let (m, n) = if flip { (cols, rows) } else { (rows, cols) };

    // m x n standard normal, row-major, m >= n.
    let mut a: Vec<f64> = (0..m * n).map(|_| rng.sample(StandardNormal)).collect();

    // Modified Gram-Schmidt with a second orthogonalization pass.
    for j in 0..n {
        for _pass in 0..2 {
            for k in 0..j {
                let mut dot = 0.0;
                for i in 0..m {
                    dot += a[i * n + k] * a[i * n + j];
                }
                for i in 0..m {
                    a[i * n + j] -= dot * a[i * n + k];
                }
            }
        }
        let norm = (0..m).map(|i| a[i * n + j] * a[i * n + j]).sum::<f64>().sqrt();
        for i in 0..m {
            a[i * n + j] /= norm;
        }
    }

    if flip {
        // Transpose back to rows x cols: orthonormal rows.
        let mut out = vec![0.0; rows * cols];
        for i in 0..m {
            for j in 0..n {
                out[j * cols + i] = a[i * n + j];
            }
        }
        out
    } else {
        a
    }
}
