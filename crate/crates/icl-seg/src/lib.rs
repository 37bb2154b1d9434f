//! Incremental-class learning for semantic segmentation.
//!
//! The library trains a small residual encoder-decoder over a sequence of
//! learning steps, each introducing new classes while only the new classes
//! are annotated. Forgetting is countered with background-unbiased
//! cross-entropy and distillation losses plus two equivariance regularizers
//! that compare features of a transformed input against transformed features
//! of the plain input, within the student and across teacher/student.
//!
//! Modules:
//! - [`dihedral`]: the 8-element flip/rotation group shared by images,
//!   masks, and feature maps.
//! - [`raster`]: tiling, disjoint single-label partitions, label remapping,
//!   task sequences, synthetic data, and the on-disk tile store.
//! - [`nn`] / [`segnet`]: the encoder-decoder network with explicit
//!   forward/backward passes, classifier expansion, and frozen teachers.
//! - [`losses`]: the unbiased cross-entropy, unbiased distillation, and the
//!   two feature-equivariance regularizers, with analytic gradients.
//! - [`trainer`]: paired-augmentation batching, per-step optimization, and
//!   sequence orchestration.
//! - [`metrics`]: confusion matrices, per-class F1, micro/macro averages,
//!   and report emission.

pub mod checkpoint;
pub mod config;
pub mod dihedral;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod segnet;
pub mod trainer;

pub use error::{Error, Result};
