//! entlab: a desk-scale laboratory for robust text-generation training.
//!
//! The crate trains a tiny conditional autoregressive model on a synthetic
//! cipher-translation task and compares five training objectives under
//! controlled corpus corruption: plain MLE, sentence-level Loss
//! Truncation, token-level TaiLr reweighting, and hard truncation of
//! tokens with large error norms (by per-batch fraction or by fixed
//! threshold). Everything is seeded and deterministic: identical configs
//! produce byte-identical corpora, checkpoints and CSV reports.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod noise;
pub mod objectives;
pub mod quality;
pub mod rng;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};
