//! Hybrid summary statistics for simulation-based inference.
//!
//! A small neural compressor learns a handful of extra summaries `s(d)` that
//! maximise mutual information with the parameters `θ` *given* an existing
//! hand-crafted summary `t(d)` (here a binned power spectrum). A conditional
//! masked autoregressive flow is then fit to `p(θ | [s, t])` and evaluated
//! for sharpness and calibration.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors with define-by-run reverse-mode autodiff.
//! - [`nn`]: CNN compressors, MLP classifier, mixture density network, Adam.
//! - [`sim`]: synthetic non-Gaussian field simulators, priors, noise.
//! - [`summaries`]: binned auto/cross power spectra and normalization.
//! - [`mi`]: EPE and CE objectives and the compressor training loop.
//! - [`flow`]: conditional MAF posterior.
//! - [`diagnostics`]: coverage, sharpness, run comparison.
//! - [`harness`]: config-driven pipeline behind the `hybridstat` CLI.

pub mod diagnostics;
pub mod flow;
mod fourier;
pub mod harness;
pub mod io;
pub mod mi;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod summaries;
pub mod tensor;

pub use tensor::{Real, Tensor, TensorError};
