//! Generative anomaly detectors for univariate sensor recordings sampled at 1 kHz.
//!
//! The crate covers the whole path from a labeled CSV interchange file to a
//! sequence-level verdict:
//!
//! * [`ingest`] parses and writes the interchange format.
//! * [`preprocess`] pads, windows, extracts statistics, splits and scales.
//! * [`engine`] is a small dense-network substrate (layers, backprop, Adam).
//! * [`hmm`], [`vae`] and [`gan`] are the three detectors.
//! * [`detect`] calibrates thresholds, judges datasets and persists bundles.
//! * [`eval`], [`synth`] and [`bench`] compute metrics, generate surrogate
//!   data and run end-to-end benchmarks.

pub mod bench;
pub mod detect;
pub mod engine;
pub mod error;
pub mod eval;
pub mod gan;
pub mod hmm;
pub mod ingest;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod vae;

pub use error::{Error, Result};
