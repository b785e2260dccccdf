//! Speaker-verification back-end: everything that happens after an embedding
//! extractor has run. Trial scoring, adaptive score normalization,
//! quality-aware calibration, fusion, detection metrics, clustering for
//! pseudo-labels, margin-based classification losses, and a semi-supervised
//! adaptation loop that ties them together.
//!
//! Determinism is a hard requirement throughout: every randomized routine
//! takes an explicit seed, and parallel code never lets scheduling order
//! reach a result.

// Numeric kernels index several arrays with one counter; iterator chains
// would obscure which dimensions line up.
#![allow(clippy::needless_range_loop)]

pub mod adaptation;
pub mod calibration;
pub mod clustering;
pub mod data;
pub mod error;
pub mod margin;
pub mod metrics;
pub mod scoring;
pub mod synth;

pub(crate) mod seeding;

pub use error::{Error, Result};
