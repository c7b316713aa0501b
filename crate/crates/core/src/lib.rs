//! Sample-wise ensembling of a zero-shot and a fine-tuned classifier.
//!
//! Every training sample that the fine-tuned model classifies correctly while
//! the zero-shot model does not contributes its fine-tuned feature vector to a
//! *zero-shot failure* (ZSF) set. At inference time the distance from a test
//! feature to its k-th nearest ZSF member decides how much weight the
//! fine-tuned model receives:
//!
//! ```text
//! d(x) = || v - v_(k) ||_2                 v_(k): k-th nearest ZSF member
//! w(x) = sigmoid(-(d(x) - a) / b)
//! P(y|x) = w(x) * P_ft(y|x) + (1 - w(x)) * P_zs(y|x)
//! ```
//!
//! The crate is `no_std` + `alloc`. All inputs are precomputed feature and
//! logit tensors; file formats, manifests and the command line live in the
//! companion `vrf` crate.
//!
//! Modules:
//!
//! - [`outputs`]: aligned model outputs, softmax, argmax, feature normalization
//!   and temperature scaling.
//! - [`knn`]: exact k-th nearest neighbor distances (blocked SIMD scan with an
//!   exact refinement pass).
//! - [`zsf`]: construction of the zero-shot failure index.
//! - [`weighting`]: distance to weight maps (sigmoid, linear, binary, constant).
//! - [`ensemble`]: probability and logit space combination, plus evaluation of
//!   whole splits.
//! - [`baselines`]: OOD-detector scores, TPR thresholds and selective prediction.
//! - [`analysis`]: accuracy-ratio curves, residual statistics, optimal
//!   combination weights and ID/OOD frontiers.
//! - [`synth`]: seeded synthetic datasets and residual streams.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod baselines;
pub mod ensemble;
mod error;
pub mod knn;
mod matrix;
pub mod outputs;
pub mod synth;
pub mod weighting;
pub mod zsf;

pub use error::{Error, Result};
pub use matrix::Matrix;
