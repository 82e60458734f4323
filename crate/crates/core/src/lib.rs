//! Core library for auditing differentially private training from weights.
//!
//! The pipeline has four stages, mirrored by the module layout:
//!
//! 1. [`nn`] + [`optim`] train small classifiers with or without DP-SGD,
//!    with [`accountant`] tracking the (epsilon, delta) budget;
//! 2. [`zoo`] samples hyperparameter grids and persists populations of
//!    trained models;
//! 3. [`features`] turns stored models into weight-statistic /
//!    hyperparameter / performance meta-features;
//! 4. [`gbdt`] + [`harness`] train boosted-tree meta-classifiers on those
//!    features and run the within-zoo and transfer experiments.

pub mod accountant;
pub mod data;
pub mod error;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
