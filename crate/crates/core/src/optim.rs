//! SGD and Adam, plus their differentially private counterparts.
//!
//! The DP path limits each example's contribution by clipping the global L2
//! norm of its gradient to the sensitivity C, then adds Gaussian noise with
//! standard deviation sigma * C to the summed clipped gradients before
//! averaging. The privatized mean feeds the identical optimizer update rule
//! as the non-private path.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backward_batch_mean, backward_per_example, Architecture, Batch, ModelParams};
use crate::rng::stream_rng;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state confined to a single training run.
#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step_count: u64,
    adam_m: Option<ModelParams<T>>,
    adam_v: Option<ModelParams<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            step_count: 0,
            adam_m: None,
            adam_v: None,
        }
    }
}

/// Per-example clipping and noise parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub enabled: bool,
    /// L2 clip norm (the sensitivity).
    pub l2_clip: f64,
    pub noise_multiplier: f64,
}

impl DpConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            l2_clip: 0.0,
            noise_multiplier: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled {
            if self.l2_clip <= 0.0 {
                return Err(Error::InvalidArgument("l2_clip must be positive".into()));
            }
            if self.noise_multiplier < 0.0 {
                return Err(Error::InvalidArgument(
                    "noise_multiplier must be nonnegative".into(),
                ));
            }
        } else if self.noise_multiplier != 0.0 {
            return Err(Error::InvalidArgument(
                "noise_multiplier must be 0 when DP is disabled".into(),
            ));
        }
        Ok(())
    }
}

/// Scale each gradient g by min(1, C / ||g||2), where the norm is the global
/// L2 norm over all layers concatenated.
pub fn clip_per_example<T: Scalar>(grads: &mut [ModelParams<T>], c: f64) -> Result<()> {
    if c <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "clip norm must be positive, got {c}"
        )));
    }
    for g in grads {
        let norm = g.global_l2_norm();
        if norm > c {
            g.scale(T::from_f64_lossy(c / norm));
        }
    }
    Ok(())
}

/// (sum of clipped gradients + N(0, sigma^2 C^2 I)) / N.
pub fn privatize<T: Scalar>(
    clipped: &[ModelParams<T>],
    c: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<ModelParams<T>> {
    if clipped.is_empty() {
        return Err(Error::InvalidArgument("empty gradient list".into()));
    }
    let mut sum = clipped[0].zeros_like();
    for g in clipped {
        sum.add_scaled(g, T::one());
    }
    Ok(privatize_sum(sum, clipped.len(), c, sigma, rng))
}

/// Noise-and-average a pre-summed batch of clipped gradients.
pub fn privatize_sum<T: Scalar>(
    mut sum: ModelParams<T>,
    n: usize,
    c: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> ModelParams<T> {
    if sigma > 0.0 {
        let scale = sigma * c;
        sum.for_each_value_mut(|v| {
            let z: f64 = rng.sample(StandardNormal);
            *v += T::from_f64_lossy(z * scale);
        });
    }
    sum.scale(T::from_f64_lossy(1.0 / n as f64));
    sum
}

/// One optimizer step. SGD: theta -= lr * g. Adam: bias-corrected
/// first/second moment update with the standard constants.
pub fn apply_update<T: Scalar>(
    state: &mut OptimizerState<T>,
    params: &mut ModelParams<T>,
    grad: &ModelParams<T>,
) -> Result<()> {
    if !params.shapes_match(grad) {
        return Err(Error::ShapeMismatch(
            "gradient does not match parameter shapes".into(),
        ));
    }
    state.step_count += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            params.add_scaled(grad, T::from_f64_lossy(-state.learning_rate));
        }
        OptimizerKind::Adam => {
            if state.adam_m.is_none() {
                state.adam_m = Some(params.zeros_like());
                state.adam_v = Some(params.zeros_like());
            }
            let m = state.adam_m.as_mut().unwrap();
            let v = state.adam_v.as_mut().unwrap();
            let t = state.step_count as i32;
            let b1 = T::from_f64_lossy(ADAM_BETA1);
            let b2 = T::from_f64_lossy(ADAM_BETA2);
            let one = T::one();
            let bc1 = T::from_f64_lossy(1.0 / (1.0 - ADAM_BETA1.powi(t)));
            let bc2 = T::from_f64_lossy(1.0 / (1.0 - ADAM_BETA2.powi(t)));
            let lr = T::from_f64_lossy(state.learning_rate);
            let eps = T::from_f64_lossy(ADAM_EPS);
            for ((pl, gl), (ml, vl)) in params
                .layers
                .iter_mut()
                .zip(&grad.layers)
                .zip(m.layers.iter_mut().zip(v.layers.iter_mut()))
            {
                for (p, g, mm, vv) in iter4(
                    pl.kernel.data_mut(),
                    gl.kernel.data(),
                    ml.kernel.data_mut(),
                    vl.kernel.data_mut(),
                ) {
                    adam_step(p, *g, mm, vv, b1, b2, one, bc1, bc2, lr, eps);
                }
                for (p, g, mm, vv) in iter4(
                    pl.bias.data_mut(),
                    gl.bias.data(),
                    ml.bias.data_mut(),
                    vl.bias.data_mut(),
                ) {
                    adam_step(p, *g, mm, vv, b1, b2, one, bc1, bc2, lr, eps);
                }
            }
        }
    }
    Ok(())
}

fn iter4<'a, T>(
    p: &'a mut [T],
    g: &'a [T],
    m: &'a mut [T],
    v: &'a mut [T],
) -> impl Iterator<Item = (&'a mut T, &'a T, &'a mut T, &'a mut T)> {
    p.iter_mut()
        .zip(g)
        .zip(m.iter_mut().zip(v.iter_mut()))
        .map(|((p, g), (m, v))| (p, g, m, v))
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn adam_step<T: Scalar>(
    p: &mut T,
    g: T,
    m: &mut T,
    v: &mut T,
    b1: T,
    b2: T,
    one: T,
    bc1: T,
    bc2: T,
    lr: T,
    eps: T,
) {
    *m = b1 * *m + (one - b1) * g;
    *v = b2 * *v + (one - b2) * g * g;
    let m_hat = *m * bc1;
    let v_hat = *v * bc2;
    *p -= lr * m_hat / (v_hat.sqrt() + eps);
}

/// Everything `train_epochs` needs to know about one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub dp: DpConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        self.dp.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T = f32> {
    pub params: ModelParams<T>,
    /// Batch size exceeded the training set and was clamped.
    pub batch_clamped: bool,
    /// Epoch at which parameters stopped being finite, if training diverged.
    pub diverged_at_epoch: Option<usize>,
}

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Train for `cfg.epochs` epochs of shuffled fixed-size minibatches (the last
/// short batch is kept). The DP path clips per-example gradients and
/// privatizes the batch mean; otherwise a plain mean gradient is used.
pub fn train_epochs<T: Scalar>(
    arch: &Architecture,
    params: ModelParams<T>,
    train: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    arch.validate_input(train)?;
    let n = train.len();
    let batch_clamped = cfg.batch_size > n;
    if batch_clamped {
        log::warn!(
            "batch size {} exceeds training size {}; clamping",
            cfg.batch_size,
            n
        );
    }
    let b = cfg.batch_size.min(n);

    let mut state = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
    let mut rng_shuffle = stream_rng(cfg.seed, SHUFFLE_STREAM);
    let mut rng_noise = stream_rng(cfg.seed, NOISE_STREAM);
    let mut params = params;
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng_shuffle);
        for step in indices.chunks(b) {
            let mb = train.gather(step);
            let grad = if cfg.dp.enabled {
                dp_mean_gradient(
                    arch,
                    &params,
                    &mb,
                    cfg.dp.l2_clip,
                    cfg.dp.noise_multiplier,
                    &mut rng_noise,
                )?
            } else {
                backward_batch_mean(arch, &params, &mb)?
            };
            apply_update(&mut state, &mut params, &grad)?;
        }
        if !params.is_finite() {
            return Ok(TrainOutcome {
                params,
                batch_clamped,
                diverged_at_epoch: Some(epoch),
            });
        }
    }
    Ok(TrainOutcome {
        params,
        batch_clamped,
        diverged_at_epoch: None,
    })
}

/// Clip-and-noise mean gradient of one minibatch.
///
/// Per-example gradients are materialized one chunk at a time so large
/// minibatches never hold the full per-example list at once. Chunk size and
/// summation order mirror `backward_batch_mean`, so with sigma = 0 and a
/// clip no larger gradients ever reach, the result is bitwise identical to
/// the plain aggregate gradient.
fn dp_mean_gradient<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
    mb: &Batch<T>,
    c: f64,
    sigma: f64,
    rng_noise: &mut impl Rng,
) -> Result<ModelParams<T>> {
    let n = mb.len();
    let mut chunk_sums = Vec::with_capacity(n.div_ceil(crate::nn::GRAD_CHUNK));
    let mut start = 0;
    while start < n {
        let end = (start + crate::nn::GRAD_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = mb.gather(&idx);
        let mut grads = backward_per_example(arch, params, &chunk)?;
        clip_per_example(&mut grads, c)?;
        let mut acc = ModelParams::zeros(arch);
        for g in &grads {
            acc.add_scaled(g, T::one());
        }
        chunk_sums.push(acc);
        start = end;
    }
    let mut sum = ModelParams::zeros(arch);
    for s in &chunk_sums {
        sum.add_scaled(s, T::one());
    }
    Ok(privatize_sum(sum, n, c, sigma, rng_noise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, init_params, loss_and_accuracy, Activation, InitScheme, Layer};
    use crate::tensor::Tensor;

    fn grad_of(values: Vec<f32>) -> ModelParams<f32> {
        ModelParams {
            layers: vec![Layer {
                kernel: Tensor::new(vec![values.len()], values).unwrap(),
                bias: Tensor::zeros(vec![1]),
            }],
        }
    }

    #[test]
    fn clip_halves_when_norm_is_twice_the_cap() {
        // ||(1.2, 1.6)|| = 2.0
        let mut grads = vec![grad_of(vec![1.2, 1.6])];
        clip_per_example(&mut grads, 1.0).unwrap();
        let d = grads[0].layers[0].kernel.data();
        assert!((d[0] - 0.6).abs() < 1e-7);
        assert!((d[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn clip_leaves_small_gradients_unchanged() {
        let g = grad_of(vec![0.3, 0.4]); // norm 0.5
        let mut grads = vec![g.clone()];
        clip_per_example(&mut grads, 1.0).unwrap();
        assert_eq!(grads[0], g);
    }

    #[test]
    fn clip_norm_matches_independent_accumulation() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(5, 0);
        let values: Vec<f32> = (0..257).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut grads = vec![grad_of(values)];
        let pre_norm = grads[0].global_l2_norm();
        clip_per_example(&mut grads, 0.7).unwrap();
        // Recompute the norm in reverse iteration order.
        let post: f64 = grads[0]
            .layers[0]
            .kernel
            .data()
            .iter()
            .rev()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        assert!((post - pre_norm.min(0.7)).abs() < 1e-6, "post {post}");
    }

    #[test]
    fn clip_rejects_nonpositive_cap() {
        let mut grads = vec![grad_of(vec![1.0])];
        assert!(clip_per_example(&mut grads, 0.0).is_err());
    }

    #[test]
    fn post_clip_norm_never_exceeds_cap() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(6, 0);
        for _ in 0..50 {
            let len = rng.random_range(1..64);
            let values: Vec<f32> = (0..len).map(|_| rng.random_range(-10.0..10.0)).collect();
            let c = rng.random_range(0.05..2.0);
            let mut grads = vec![grad_of(values)];
            clip_per_example(&mut grads, c).unwrap();
            assert!(grads[0].global_l2_norm() <= c + 1e-6);
        }
    }

    #[test]
    fn privatize_with_zero_sigma_is_the_exact_mean() {
        let grads = vec![grad_of(vec![1.0, 2.0]), grad_of(vec![3.0, 6.0])];
        let mut rng = crate::rng::stream_rng(7, 0);
        let out = privatize(&grads, 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(out.layers[0].kernel.data(), &[2.0, 4.0]);
    }

    #[test]
    fn privatize_rejects_empty_list() {
        let grads: Vec<ModelParams<f32>> = Vec::new();
        let mut rng = crate::rng::stream_rng(7, 0);
        assert!(privatize(&grads, 1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn privatize_is_seed_reproducible() {
        let grads = vec![grad_of(vec![0.5f32; 16])];
        let a = privatize(&grads, 1.0, 1.0, &mut crate::rng::stream_rng(9, 2)).unwrap();
        let b = privatize(&grads, 1.0, 1.0, &mut crate::rng::stream_rng(9, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pure_noise_std_matches_sigma() {
        // Zero gradient, N = 1, sigma = 1, C = 1: output is a pure standard
        // Gaussian draw per entry.
        let zero = grad_of(vec![0.0f32; 100_000]);
        let mut rng = crate::rng::stream_rng(11, 0);
        let out = privatize(&[zero], 1.0, 1.0, &mut rng).unwrap();
        let d = out.layers[0].kernel.data();
        let mean: f64 = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        let var: f64 =
            d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        let std = var.sqrt();
        assert!((std - 1.0).abs() < 0.02, "sample std {std}");
    }

    #[test]
    fn noise_scale_is_sigma_c_over_n() {
        let n = 8usize;
        let sum = grad_of(vec![0.0f32; 100_000]);
        let mut rng = crate::rng::stream_rng(13, 0);
        let out = privatize_sum(sum, n, 0.5, 1.2, &mut rng);
        let d = out.layers[0].kernel.data();
        let var: f64 = d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / d.len() as f64;
        let expect = 1.2 * 0.5 / n as f64;
        assert!(
            (var.sqrt() - expect).abs() / expect < 0.02,
            "std {} vs {expect}",
            var.sqrt()
        );
    }

    #[test]
    fn sgd_one_step_arithmetic() {
        let mut params = grad_of(vec![1.0]);
        let grad = grad_of(vec![2.0]);
        let mut state = OptimizerState::new(OptimizerKind::Sgd, 0.1);
        apply_update(&mut state, &mut params, &grad).unwrap();
        assert!((params.layers[0].kernel.data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn sgd_zero_gradient_is_a_noop() {
        let mut params = grad_of(vec![1.5, -2.5]);
        let before = params.clone();
        let grad = grad_of(vec![0.0, 0.0]);
        let mut state = OptimizerState::new(OptimizerKind::Sgd, 0.3);
        apply_update(&mut state, &mut params, &grad).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_magnitude_is_about_lr() {
        // Hand-evaluated bias-corrected step 1:
        // |delta| = lr*|g| / (|g| + eps*sqrt(1 - beta2)) ~= lr.
        // Double precision so the check exercises the update math rather
        // than storage rounding.
        let g = 2.0f64;
        let lr = 0.01f64;
        let mut params = ModelParams::<f64> {
            layers: vec![Layer {
                kernel: Tensor::new(vec![1], vec![1.0f64]).unwrap(),
                bias: Tensor::zeros(vec![1]),
            }],
        };
        let grad = ModelParams::<f64> {
            layers: vec![Layer {
                kernel: Tensor::new(vec![1], vec![g]).unwrap(),
                bias: Tensor::zeros(vec![1]),
            }],
        };
        let mut state = OptimizerState::new(OptimizerKind::Adam, lr);
        apply_update(&mut state, &mut params, &grad).unwrap();
        let delta = (1.0 - params.layers[0].kernel.data()[0]).abs();
        let expect = lr * g / (g + ADAM_EPS * (1.0 - ADAM_BETA2).sqrt());
        assert!((delta - expect).abs() / expect < 1e-6, "{delta} vs {expect}");
        assert!((delta - lr).abs() / lr < 1e-5);
    }

    fn separable_batch(n: usize) -> Batch<f32> {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(100, 0);
        let mut data = Vec::with_capacity(n * 4);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2) as u8;
            let base = if class == 0 { 0.15 } else { 0.85 };
            for _ in 0..4 {
                data.push((base + rng.random_range(-0.1..0.1)) as f32);
            }
            labels.push(class);
        }
        Batch::new(Tensor::new(vec![n, 2, 2, 1], data).unwrap(), labels).unwrap()
    }

    fn toy_fcn_2class() -> Architecture {
        let mut arch = Architecture::fcn((2, 2, 1), Activation::Tanh);
        arch.hidden_width = 8;
        arch.num_classes = 2;
        arch
    }

    #[test]
    fn smoke_training_separates_two_classes() {
        let arch = toy_fcn_2class();
        let train = separable_batch(64);
        let params = init_params(&arch, InitScheme::GlorotNormal, 0.3, 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            epochs: 5,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.5,
            dp: DpConfig::disabled(),
            seed: 2,
        };
        let out = train_epochs(&arch, params, &train, &cfg).unwrap();
        assert!(out.diverged_at_epoch.is_none());
        let logits = forward(&arch, &out.params, &train).unwrap();
        let (_, acc) = loss_and_accuracy(&logits, &train.labels).unwrap();
        assert!(acc >= 0.95, "train accuracy {acc}");
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let arch = toy_fcn_2class();
        let train = separable_batch(16);
        let params: ModelParams<f32> = init_params(&arch, InitScheme::Normal, 0.2, 3).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 0,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            dp: DpConfig::disabled(),
            seed: 4,
        };
        let out = train_epochs(&arch, params.clone(), &train, &cfg).unwrap();
        assert_eq!(out.params, params);
    }

    #[test]
    fn dp_with_zero_noise_and_huge_clip_degenerates_to_sgd() {
        let arch = toy_fcn_2class();
        let train = separable_batch(32);
        let params: ModelParams<f32> =
            init_params(&arch, InitScheme::GlorotNormal, 0.3, 5).unwrap();
        let base = TrainConfig {
            batch_size: 8,
            epochs: 3,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.2,
            dp: DpConfig::disabled(),
            seed: 6,
        };
        let mut dp_cfg = base.clone();
        dp_cfg.dp = DpConfig {
            enabled: true,
            l2_clip: 1e9,
            noise_multiplier: 0.0,
        };
        let plain = train_epochs(&arch, params.clone(), &train, &base).unwrap();
        let dp = train_epochs(&arch, params, &train, &dp_cfg).unwrap();
        let worst = plain
            .params
            .iter_values()
            .zip(dp.params.iter_values())
            .map(|(&a, &b)| {
                let denom = (a.abs().max(b.abs())).max(1e-6);
                ((a - b).abs() / denom) as f64
            })
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-5, "worst relative deviation {worst}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let arch = toy_fcn_2class();
        let train = separable_batch(24);
        let params: ModelParams<f32> = init_params(&arch, InitScheme::HeNormal, 0.3, 7).unwrap();
        let cfg = TrainConfig {
            batch_size: 7,
            epochs: 2,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.02,
            dp: DpConfig {
                enabled: true,
                l2_clip: 0.8,
                noise_multiplier: 0.7,
            },
            seed: 8,
        };
        let a = train_epochs(&arch, params.clone(), &train, &cfg).unwrap();
        let b = train_epochs(&arch, params, &train, &cfg).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn oversized_batch_is_clamped_and_reported() {
        let arch = toy_fcn_2class();
        let train = separable_batch(10);
        let params: ModelParams<f32> = init_params(&arch, InitScheme::Normal, 0.2, 9).unwrap();
        let cfg = TrainConfig {
            batch_size: 64,
            epochs: 1,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            dp: DpConfig::disabled(),
            seed: 10,
        };
        let out = train_epochs(&arch, params, &train, &cfg).unwrap();
        assert!(out.batch_clamped);
    }
}
