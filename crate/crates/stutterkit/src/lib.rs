//! stutterkit — a self-contained toolkit for multi-class stuttering event
//! detection from speech audio.
//!
//! The crate covers the full experimental pipeline:
//!
//! - [`audio`]: WAV decoding, mono downmix, band-limited resampling to 16 kHz.
//! - [`features`]: 20-dim MFCC front-end with cepstral mean normalization and
//!   a small binary feature container.
//! - [`augment`]: SNR-controlled music / noise / babble mixing and image-source
//!   room-impulse-response reverberation.
//! - [`dataset`]: segment manifests, podcast-grouped cross-validation splits,
//!   and inverse-frequency class weights.
//! - [`model`]: time-delay + BiLSTM encoders with statistical pooling and
//!   single-branch, multi-branch, and multi-contextual classifier variants.
//! - [`loss`] / [`metrics`]: weighted cross-entropy, the joint two-branch
//!   objective, macro F1, and evaluation reports.
//! - [`train`]: Adam training with early stopping, k-fold cross-validation,
//!   and pretrain-then-freeze transfer workflows.
//! - [`synth`]: a deterministic synthetic corpus generator used for
//!   end-to-end tests and demos.
//!
//! Everything is implemented in pure Rust on `f64` tensors; runs are
//! bit-reproducible for a fixed seed and configuration.

pub mod audio;
pub mod augment;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
