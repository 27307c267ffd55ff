//! Harmonic-percussive source separation with a three-branch multi-scale
//! DenseNet (3W-MDenseNet).
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff and the conv/pool/
//!   batch-norm kernels the network needs.
//! - [`dsp`]: STFT/ISTFT, magnitude patching, normalization and mask
//!   application with mixture-phase reconstruction.
//! - [`network`]: dense blocks, MDenseNet branches, the three-branch model and
//!   its checkpoint format.
//! - [`training`]: masking loss, ADAM, plateau schedule and the training loop.
//! - [`baseline`]: median-filtering HPSS.
//! - [`metrics`]: BSS-Eval style SDR/SIR/SAR.
//! - [`toolkit`]: WAV I/O, synthetic data, config files and the CLI.

pub mod baseline;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod toolkit;
pub mod training;

pub use error::{Error, Result};
