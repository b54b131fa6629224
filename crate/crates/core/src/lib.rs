//! Multi-task remote physiological measurement at desk scale.
//!
//! The crate bundles everything needed to train and evaluate a
//! mixture-of-low-rank-experts regressor for HR / BVP / SpO2 / RR on
//! synthetic spatial-temporal maps (STMaps):
//!
//! * [`autodiff`] — a minimal reverse-mode engine over flat f32 tensors,
//!   with the conv / norm / pooling primitives the backbone needs.
//! * [`stmap`] — the STMap container, binary file format, spatio-temporal
//!   augmentation and the multi-domain synthetic generator.
//! * [`signal`] — classical peak / IBI / PSD processing for HR, RR and HRV.
//! * [`mle`] — low-rank expert layers with element-wise routers and the
//!   orthogonality regularizer over expert weights.
//! * [`model`] — the convolutional backbone, task heads, parameter and
//!   MAC accounting.
//! * [`losses`] — task, consistency and physiological-prior objectives
//!   plus the scheduled joint loss.
//! * [`train`] — the Adam training loop, checkpointing and loss logs.
//! * [`eval`] — metric reports and the leave-one-domain-out / k-fold
//!   protocol harnesses.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mle;
pub mod model;
pub mod rng;
pub mod signal;
pub mod stmap;
pub mod threads;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
