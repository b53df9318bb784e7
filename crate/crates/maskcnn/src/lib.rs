//! Fine-grained recognition with figure-ground masks.
//!
//! The crate builds up in layers:
//!
//! * [`tensor`] — dense NCHW tensors, a reverse-mode autodiff tape, and SGD;
//! * [`maskgen`] — keypoint-hull part masks and label maps;
//! * [`image`] — planar RGB images, PPM/PGM IO, resizing;
//! * [`dataio`] — dataset manifests, a synthetic bird generator, and binary
//!   checkpoint/feature formats;
//! * [`segnet`] — a fully convolutional segmentation network with skip
//!   fusion;
//! * [`mcnn`] — masked multi-stream convolutional feature extractor and
//!   classifier head;
//! * [`classifier`] — one-vs-all logistic regression and PCA whitening over
//!   extracted features;
//! * [`metrics`] — box IoU, part localization, segmentation and
//!   classification scores;
//! * [`pipeline`] — phase orchestration from raw data to the final report.

pub mod classifier;
pub mod dataio;
pub mod error;
pub mod image;
pub mod maskgen;
pub mod mcnn;
pub mod metrics;
pub mod segnet;
pub mod tensor;
pub(crate) mod warn;

pub use error::{Error, Result};
