//! Model-zoo construction: hyperparameter sampling, epsilon-tail
//! rebalancing, training orchestration and persistence.

mod build;
mod sample;
mod store;

pub use build::{build_zoo, ZooConfig};
pub use sample::{
    rebalance_epsilon, sample_configs, RebalanceReport, EPSILON_BAND, EPSILON_CAP,
    OVERSAMPLE_RATIO,
};
pub use store::{load_weights, load_zoo, save_weights, write_manifest, RecordMeta};

use serde::{Deserialize, Serialize};

use crate::accountant::{self, Epsilon, PrivacySpec};
use crate::error::{Error, Result};
use crate::nn::{Activation, ArchKind, Architecture, InitScheme, ModelParams};
use crate::optim::OptimizerKind;

/// One sampled training configuration. Every field lies on its grid; the
/// grids (and the fixed epochs per architecture) are defined in [`grids`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub train_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2_clip: f64,
    /// 0 when DP training is disabled.
    pub noise_multiplier: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub activation: Activation,
    pub init_scheme: InitScheme,
    pub init_std: f64,
    pub dp_enabled: bool,
    /// Training seed; not part of the uniqueness key.
    pub seed: u64,
}

/// The hyperparameter grids models are sampled from.
pub mod grids {
    pub const FRACTION_COUNT: usize = 15; // 0.3 to 1.0, step 0.05
    pub const BATCH_MIN: usize = 32;
    pub const BATCH_MAX: usize = 2048;
    pub const CLIP_COUNT: usize = 100; // equally spaced in [0.1, 1.5]
    pub const CLIP_MIN: f64 = 0.1;
    pub const CLIP_MAX: f64 = 1.5;
    pub const NOISE_COUNT: usize = 10_000; // equally spaced in [1e-3, 1.5]
    pub const NOISE_MIN: f64 = 1e-3;
    pub const NOISE_MAX: f64 = 1.5;
    pub const LR_COUNT: usize = 10_000; // equally spaced in [1e-3, 0.1]
    pub const LR_MIN: f64 = 1e-3;
    pub const LR_MAX: f64 = 0.1;
    pub const STD_COUNT: usize = 10_000; // equally spaced in [0.1, 0.5]
    pub const STD_MIN: f64 = 0.1;
    pub const STD_MAX: f64 = 0.5;
    pub const EPOCHS_FCN: usize = 5;
    pub const EPOCHS_CNN: usize = 18;

    pub fn fraction(i: usize) -> f64 {
        (30 + 5 * i) as f64 / 100.0
    }

    fn spaced(min: f64, max: f64, count: usize, i: usize) -> f64 {
        min + i as f64 * (max - min) / (count - 1) as f64
    }

    pub fn clip(i: usize) -> f64 {
        spaced(CLIP_MIN, CLIP_MAX, CLIP_COUNT, i)
    }

    pub fn noise(i: usize) -> f64 {
        spaced(NOISE_MIN, NOISE_MAX, NOISE_COUNT, i)
    }

    pub fn learning_rate(i: usize) -> f64 {
        spaced(LR_MIN, LR_MAX, LR_COUNT, i)
    }

    pub fn init_std(i: usize) -> f64 {
        spaced(STD_MIN, STD_MAX, STD_COUNT, i)
    }

    pub fn epochs_for(kind: super::ArchKind) -> usize {
        match kind {
            super::ArchKind::Fcn => EPOCHS_FCN,
            super::ArchKind::Cnn => EPOCHS_CNN,
        }
    }
}

impl HyperParams {
    /// Uniqueness key over the sampled grid fields (the training seed is
    /// excluded: the same combination never repeats with another seed).
    pub fn grid_key(&self) -> [u64; 11] {
        [
            self.train_fraction.to_bits(),
            self.batch_size as u64,
            self.epochs as u64,
            self.l2_clip.to_bits(),
            self.noise_multiplier.to_bits(),
            self.optimizer as u64,
            self.learning_rate.to_bits(),
            self.activation as u64,
            self.init_scheme as u64,
            self.init_std.to_bits(),
            u64::from(self.dp_enabled),
        ]
    }

    pub fn validate(&self, kind: ArchKind) -> Result<()> {
        if self.dp_enabled != (self.noise_multiplier > 0.0) {
            return Err(Error::InvalidArgument(
                "dp_enabled must match noise_multiplier > 0".into(),
            ));
        }
        if self.epochs != grids::epochs_for(kind) {
            return Err(Error::InvalidArgument(format!(
                "epochs {} do not match the fixed count for {kind:?}",
                self.epochs
            )));
        }
        if !(grids::BATCH_MIN..=grids::BATCH_MAX).contains(&self.batch_size) {
            return Err(Error::InvalidArgument("batch size off grid".into()));
        }
        Ok(())
    }

    /// The accountant inputs implied by this configuration.
    pub fn privacy_spec(&self, dataset_size: usize, delta: f64) -> PrivacySpec {
        PrivacySpec {
            dataset_size,
            batch_size: self.batch_size,
            epochs: self.epochs,
            noise_multiplier: self.noise_multiplier,
            delta,
        }
    }

    pub fn epsilon(&self, dataset_size: usize, delta: f64) -> Result<Epsilon> {
        if !self.dp_enabled {
            return Ok(Epsilon::Infinite);
        }
        accountant::epsilon(&self.privacy_spec(dataset_size, delta), self.train_fraction)
    }

    /// A fixed configuration for tests that need a syntactically valid one.
    pub fn placeholder() -> Self {
        HyperParams {
            train_fraction: 1.0,
            batch_size: 64,
            epochs: grids::EPOCHS_FCN,
            l2_clip: 1.0,
            noise_multiplier: 0.0,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.01,
            activation: Activation::Tanh,
            init_scheme: InitScheme::GlorotNormal,
            init_std: 0.3,
            dp_enabled: false,
            seed: 0,
        }
    }
}

/// Everything stored for one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModelRecord {
    pub record_id: String,
    pub architecture: Architecture,
    pub dataset_name: String,
    pub hyperparams: HyperParams,
    pub weights: ModelParams<f32>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub epsilon: Epsilon,
    pub delta: f64,
}

impl TrainedModelRecord {
    pub fn check_invariants(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.train_accuracy)
            && (0.0..=1.0).contains(&self.test_accuracy)
            && self.train_loss >= 0.0
            && self.test_loss >= 0.0;
        if !ok {
            return Err(Error::DegenerateData(format!(
                "record {} has out-of-range metrics",
                self.record_id
            )));
        }
        if self.epsilon.is_finite() != self.hyperparams.dp_enabled {
            return Err(Error::DegenerateData(format!(
                "record {}: finite epsilon must coincide with DP training",
                self.record_id
            )));
        }
        if !self.weights.is_finite() {
            return Err(Error::DegenerateData(format!(
                "record {} has non-finite weights",
                self.record_id
            )));
        }
        Ok(())
    }
}

/// Zoo-level configuration stored in the manifest header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooHeader {
    pub zoo_id: String,
    pub architecture: Architecture,
    pub dataset_name: String,
    pub dataset_train_size: usize,
    pub dataset_test_size: usize,
    pub delta: f64,
    pub seed: u64,
    pub epsilon_cap: f64,
    /// Both classes were sampled through the same epsilon-viability filter
    /// so their hyperparameter marginals match.
    pub viability_matched: bool,
    pub n_dp_target: usize,
    pub n_nondp_target: usize,
    pub grid_version: String,
    pub rebalance: Option<RebalanceReport>,
}

/// An addressable collection of trained-model records for one
/// (architecture, dataset) pair.
#[derive(Clone, Debug)]
pub struct ZooManifest {
    pub header: ZooHeader,
    pub records: Vec<TrainedModelRecord>,
    /// Record ids that diverged during training and were excluded.
    pub failed: Vec<(String, String)>,
}

impl ZooManifest {
    pub fn n_dp(&self) -> usize {
        self.records.iter().filter(|r| r.hyperparams.dp_enabled).count()
    }

    pub fn n_nondp(&self) -> usize {
        self.records.len() - self.n_dp()
    }
}

pub const GRID_VERSION: &str = "table1-v1";
