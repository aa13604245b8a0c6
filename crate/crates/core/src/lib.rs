//! Core library for the mixforge pipeline: SNR-controlled construction of
//! mixed-audio spoof-detection datasets, signal-level analysis kernels
//! (analytic signal / instantaneous frequency, Teager-Kaiser energy), a
//! reverse-mode autodiff engine, and a prompt-tuned detector with a frozen
//! transformer backbone plus its trainer and EER evaluation harness.
//!
//! Module map:
//! - [`audio`]  — WAV I/O, resampling, fixed-length shaping
//! - [`dsp`]    — pure DSP kernels (Hilbert, IF, TKEO, flux)
//! - [`autodiff`] — tensors, tape-based reverse-mode differentiation
//! - [`mix`]    — source pools, pairing plans, SNR mixing, manifests
//! - [`model`]  — feature encoder, prompt streams, frozen transformer, head
//! - [`train`]  — AdamW, BCE loss, training loop, EER metrics, ablation

pub mod audio;
pub mod autodiff;
pub mod dsp;
pub mod mix;
pub mod model;
pub mod train;
