//! File formats, manifest-level workflows and the `vrf` command line on top
//! of [`vrf_core`].
//!
//! - [`tensor_io`]: `VRF1` tensor files.
//! - [`manifest`]: dataset manifests and lazy split loading.
//! - [`index_io`]: saved ZSF indexes.
//! - [`pipeline`]: evaluation, sweeps, frontiers, baselines, analyses.
//! - [`report`]: JSON and CSV outputs.
//! - [`synth_io`]: synthetic datasets on disk.
//! - [`bench`]: k-NN latency measurement.

pub mod bench;
pub mod cli;
mod error;
pub mod index_io;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod synth_io;
pub mod tensor_io;

pub use error::{Error, Result};
pub use vrf_core;
