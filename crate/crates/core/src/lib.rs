//! Pseudo-positive regularization (PPR) toolkit for identification-style
//! re-ID embeddings.
//!
//! The pipeline trains a SoftMax identification classifier on labeled
//! feature vectors, mines nearest-neighbor pseudo-positives from an
//! unlabeled pool with the trained model's penultimate features, retrains on
//! the augmented set, and scores retrieval with CMC and mAP.
//!
//! - [`embedding`]: samples, datasets, deterministic splits, JSON-lines IO.
//! - [`model`]: feed-forward classifier, momentum SGD, checkpoints.
//! - [`pseudo`]: nearest-neighbor mining, selection, merging, and the
//!   DisturbLabel baselines.
//! - [`eval`]: gallery ranking, average precision, cross-camera and
//!   single-shot protocols.
//! - [`synth`]: seeded synthetic identity benchmark.
//! - [`runner`]: end-to-end experiments and comparison tables.

pub mod embedding;
pub mod error;
pub mod eval;
pub mod model;
pub mod pseudo;
pub mod runner;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
