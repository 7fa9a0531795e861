//! Complementary-label test-time adaptation.
//!
//! A small, deterministic engine that adapts a batch-norm MLP to shifted
//! test streams by suppressing the categories a model is confident a sample
//! does *not* belong to. Besides the basic and confidence-weighted
//! complementary losses it ships pseudo-label and entropy baselines, a
//! percentile memory bank for dynamic thresholds, synthetic shift
//! benchmarks, and an oracle suite for the underlying algebra.

pub mod adapt;
pub mod bank;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod labeling;
pub mod netcore;
pub mod numerics;
pub mod risk;
pub mod scenarios;
pub mod verify;

pub use error::{Error, Result};
