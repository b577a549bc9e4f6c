//! Core library for manifold-guided fuzzing of neural classifiers.
//!
//! The crate provides, in dependency order:
//!
//! * [`tensor`] / [`model`] / [`manifest`] — dense `f32` tensors, network
//!   descriptions and their on-disk format;
//! * [`forward`] — single-input inference with activation traces;
//! * [`train`] — a small `f64` batch SGD engine and gradient checking;
//! * [`quant`] — simulated int8 weight quantization;
//! * [`data`] — synthetic datasets, IDX loading, stratified splits;
//! * [`coverage`] — neuron-coverage criteria over activation traces;
//! * [`manifold`] — learned low-dimensional input manifolds (per-class PCA
//!   or a decoder network) used as the mutation space;
//! * [`oracle`] — fault detectors (label consistency, differential,
//!   quantization diff);
//! * [`traversal`] — the fuzzing campaign: seed queue, latent-space
//!   trajectory statistics and the explore/exploit schedule;
//! * [`report`] — fault records, diversity statistics, artifact export and
//!   retraining evaluation.

pub mod coverage;
pub mod data;
pub mod error;
pub mod forward;
pub mod manifest;
pub mod manifold;
pub mod model;
pub mod oracle;
pub mod quant;
pub mod report;
pub mod tensor;
pub mod train;
pub mod traversal;

pub use error::{Error, Result};
