//! Knee landmark localization with hourglass networks and a soft-argmax head.
//!
//! The crate is organised bottom-up:
//!
//! - [`imaging`]: images with physical pixel spacing, landmark sets, ROI geometry
//!   and the annotation CSV format.
//! - [`augment`]: geometric and photometric training-time transforms.
//! - [`nn`]: tensors, differentiable primitives, residual blocks and the hourglass model.
//! - [`losses`]: wing / L1 / L2 / elastic losses and MixUp.
//! - [`training`]: Adam, cross-validation splits, the training loop, checkpoints.
//! - [`eval`]: radial errors, PCK, outliers, fold aggregation and CDF export.
//! - [`phantom`]: deterministic synthetic knee radiographs.
//! - [`pipeline`]: two-stage inference and the run configuration document.
//! - [`ablation`]: the ablation grid.

pub mod ablation;
pub mod augment;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod losses;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
